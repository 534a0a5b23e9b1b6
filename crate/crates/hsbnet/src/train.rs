//! Trainable network `h = psi o psi0 o phi`: the polar adjoint with shared
//! real kernel weights, the fixed polar to Cartesian resampling, and a stack
//! of residual two-channel convolution layers. Gradients are derived by hand
//! for this fixed graph.
//!
//! Conventions:
//! - `scales[2 * branch + w]` is the channel prefactor modulus of branch
//!   `branch` (0 = cosine weighted, 1 = plain) at frequency `w`.
//! - Layer filters are indexed `j = 3 w + t` with `t = 0, 1, 2` for the
//!   `11`, `12` and `22` slots. A layer maps `(x1, x2)` to
//!   `(A*x1 - B*x2 + s x1, -B*x1 + C*x2 + s x2)` where `A`, `B`, `C` are the
//!   sums over `w` of the `22`, `12` and `11` filters, the same adjugate
//!   pattern as the first exact deconvolution layer.

use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::adjoint::{cosine_matrix, diag_phase, initial_scales, kernel_matrix, phi0_apply_with, split_kernel, CosineForm, KAPPA_BAR_PHASE};
use crate::butterfly::{block_truncate, LowRankKernelSpec};
use crate::deconv::{FilterBank, TorusSolver, DEFAULT_NQ, DEFAULT_PAD};
use crate::error::{arg, check_shape, Error, Result};
use crate::forward::{kappa, CoefPair, DatasetSample, FarField};
use crate::grid::{freq_select_map, PolarResampler, ProblemConfig};
use crate::io::{manifest_path, ArrayContainer, Manifest};
use crate::linalg::{conj_t, frob, frob_c, spectral_norm_c};
use crate::rng::{field, stream};
use crate::C64;

pub const DEFAULT_LAYERS: usize = 8;
pub const DEFAULT_FILTER_SIZE: usize = 9;
pub const FILTERS_PER_LAYER: usize = 6;
/// Gain of the unit impulses in the identity-like initialization.
pub const DEFAULT_IMPULSE_GAIN: f64 = 0.05;

/// How `K` is stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelMode {
    /// Dense `K_cos`, `K_sin`.
    Dense,
    /// Butterfly factors `U M V` with fixed sparsity patterns.
    Butterfly(LowRankKernelSpec),
}

/// How the cosine weights of the first branch are parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CosineParam {
    /// First column of a circulant matrix.
    Circulant,
    /// Diagonal phase `d = a + i b`, weights `-Re(conj(d_i) d_j)`.
    Phase,
}

impl CosineParam {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "circulant" => Some(Self::Circulant),
            "phase" => Some(Self::Phase),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Circulant => "circulant",
            Self::Phase => "phase",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Exact kernel, exact cosine weights, initial scales, impulse filters.
    Exact,
    /// Gaussian perturbation of every tensor around zero, seeded.
    Random,
}

impl Init {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "exact" => Some(Self::Exact),
            "random" => Some(Self::Random),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Exact => "exact",
            Self::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    pub problem: ProblemConfig,
    pub kernel: KernelMode,
    pub cosine: CosineParam,
    pub layers: usize,
    /// Odd side length of every convolution filter.
    pub filter_size: usize,
    /// Rectifier after every layer but the last.
    pub rectifier: bool,
    /// When false the cosine weights receive zero gradient.
    pub train_cosine: bool,
}

impl NetConfig {
    pub fn new(problem: ProblemConfig) -> Self {
        Self {
            problem,
            kernel: KernelMode::Dense,
            cosine: CosineParam::Circulant,
            layers: DEFAULT_LAYERS,
            filter_size: DEFAULT_FILTER_SIZE,
            rectifier: false,
            train_cosine: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("the network needs at least one layer".into()));
        }
        if self.filter_size % 2 == 0 {
            return Err(Error::Config(format!("filter size must be odd, got {}", self.filter_size)));
        }
        if self.filter_size > 2 * self.problem.n_c - 1 {
            return Err(Error::Config(format!(
                "filter size {} exceeds the lag range {}",
                self.filter_size,
                2 * self.problem.n_c - 1
            )));
        }
        if let KernelMode::Butterfly(spec) = self.kernel {
            spec.validate(self.problem.n_theta, self.problem.n_rho)?;
        }
        Ok(())
    }

    /// Configuration and mode flags as manifest entries.
    pub fn to_manifest(&self, m: &mut Manifest) -> Result<()> {
        let p = &self.problem;
        m.set("omega1", crate::io::fmt_f64(p.omega1))?;
        m.set("omega2", crate::io::fmt_f64(p.omega2))?;
        m.set("n_theta", p.n_theta)?;
        m.set("n_c", p.n_c)?;
        m.set("alpha", crate::io::fmt_f64(p.alpha))?;
        match self.kernel {
            KernelMode::Dense => m.set("mode", "uncompressed")?,
            KernelMode::Butterfly(spec) => {
                m.set("mode", "compressed")?;
                m.set("rank", spec.r)?;
                m.set("blocks", spec.n_r)?;
            }
        }
        m.set("cosine", self.cosine.name())?;
        m.set("layers", self.layers)?;
        m.set("filter_size", self.filter_size)?;
        m.set("rectifier", self.rectifier)?;
        m.set("train_cosine", self.train_cosine)
    }

    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        let problem = ProblemConfig::new(
            m.parse_value("omega1")?,
            m.parse_value("omega2")?,
            m.parse_value("n_theta")?,
            m.parse_value("n_c")?,
            m.parse_value("alpha")?,
        )?;
        let kernel = match m.require("mode")? {
            "uncompressed" => KernelMode::Dense,
            "compressed" => KernelMode::Butterfly(LowRankKernelSpec { r: m.parse_value("rank")?, n_r: m.parse_value("blocks")? }),
            other => return Err(Error::Config(format!("unknown mode {other:?}"))),
        };
        let name = m.require("cosine")?;
        let cosine = CosineParam::parse(name).ok_or_else(|| Error::Config(format!("unknown cosine form {name:?}")))?;
        let cfg = Self {
            problem,
            kernel,
            cosine,
            layers: m.parse_value("layers")?,
            filter_size: m.parse_value("filter_size")?,
            rectifier: m.parse_value("rectifier")?,
            train_cosine: m.parse_value("train_cosine")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Kernel storage. Complex factors are stored as `[real, imaginary]`.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelParams {
    Dense { cos: Array2<f64>, sin: Array2<f64> },
    Factored { u: [Array2<f64>; 2], m: [Array2<f64>; 2], v: [Array2<f64>; 2] },
}

#[derive(Debug, Clone, PartialEq)]
pub enum CosineParams {
    Circulant(Array1<f64>),
    Phase { re: Array1<f64>, im: Array1<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// Six `s x s` filters, index `3 w + t`.
    pub filters: Vec<Array2<f64>>,
    /// Residual scale, one entry.
    pub scale: Array1<f64>,
}

/// All trainable tensors. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub kernel: KernelParams,
    pub cosine: CosineParams,
    /// Four channel scales, index `2 * branch + w`.
    pub scales: Array1<f64>,
    pub layers: Vec<ConvLayer>,
}

impl NetParams {
    /// Named views in a fixed order; names match the checkpoint arrays.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out: Vec<(String, ArrayViewD<'_, f64>)> = Vec::new();
        match &self.kernel {
            KernelParams::Dense { cos, sin } => {
                out.push(("K_cos".into(), cos.view().into_dyn()));
                out.push(("K_sin".into(), sin.view().into_dyn()));
            }
            KernelParams::Factored { u, m, v } => {
                for (name, pair) in [("U", u), ("M", m), ("V", v)] {
                    out.push((format!("{name}_re"), pair[0].view().into_dyn()));
                    out.push((format!("{name}_im"), pair[1].view().into_dyn()));
                }
            }
        }
        match &self.cosine {
            CosineParams::Circulant(c) => out.push(("C".into(), c.view().into_dyn())),
            CosineParams::Phase { re, im } => {
                out.push(("D_re".into(), re.view().into_dyn()));
                out.push(("D_im".into(), im.view().into_dyn()));
            }
        }
        out.push(("scales".into(), self.scales.view().into_dyn()));
        for (i, layer) in self.layers.iter().enumerate() {
            for (j, f) in layer.filters.iter().enumerate() {
                out.push((format!("cnn.layer{i}.filter{j}"), f.view().into_dyn()));
            }
            out.push((format!("cnn.layer{i}.scale"), layer.scale.view().into_dyn()));
        }
        out
    }

    /// Mutable views in the order of [`NetParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out: Vec<(String, ArrayViewMutD<'_, f64>)> = Vec::new();
        match &mut self.kernel {
            KernelParams::Dense { cos, sin } => {
                out.push(("K_cos".into(), cos.view_mut().into_dyn()));
                out.push(("K_sin".into(), sin.view_mut().into_dyn()));
            }
            KernelParams::Factored { u, m, v } => {
                for (name, pair) in [("U", u), ("M", m), ("V", v)] {
                    let [re, im] = pair;
                    out.push((format!("{name}_re"), re.view_mut().into_dyn()));
                    out.push((format!("{name}_im"), im.view_mut().into_dyn()));
                }
            }
        }
        match &mut self.cosine {
            CosineParams::Circulant(c) => out.push(("C".into(), c.view_mut().into_dyn())),
            CosineParams::Phase { re, im } => {
                out.push(("D_re".into(), re.view_mut().into_dyn()));
                out.push(("D_im".into(), im.view_mut().into_dyn()));
            }
        }
        out.push(("scales".into(), self.scales.view_mut().into_dyn()));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (j, f) in layer.filters.iter_mut().enumerate() {
                out.push((format!("cnn.layer{i}.filter{j}"), f.view_mut().into_dyn()));
            }
            out.push((format!("cnn.layer{i}.scale"), layer.scale.view_mut().into_dyn()));
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// `self += a * other`; shapes must agree.
    pub fn add_scaled(&mut self, a: f64, other: &NetParams) {
        for ((_, mut t), (_, o)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            t.scaled_add(a, &o);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors().iter().flat_map(|(_, t)| t.iter().copied()).fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `(K_cos, K_sin)` of the dense kernel the parameters represent.
    pub fn kernel_split(&self, masks: Option<&[Array2<f64>; 3]>) -> Result<(Array2<f64>, Array2<f64>)> {
        match &self.kernel {
            KernelParams::Dense { cos, sin } => Ok((cos.clone(), sin.clone())),
            KernelParams::Factored { .. } => {
                let masks = masks.ok_or_else(|| Error::State("factored kernel needs structural masks".into()))?;
                let [u, m, v] = self.masked_factors(masks)?;
                Ok(split_kernel(u.dot(&m).dot(&v).view()))
            }
        }
    }

    fn masked_factors(&self, masks: &[Array2<f64>; 3]) -> Result<[Array2<C64>; 3]> {
        let KernelParams::Factored { u, m, v } = &self.kernel else {
            return Err(Error::State("kernel is not factored".into()));
        };
        let join = |p: &[Array2<f64>; 2], mask: &Array2<f64>| -> Result<Array2<C64>> {
            check_shape("factor", p[0].dim(), mask.dim())?;
            check_shape("factor", p[1].dim(), mask.dim())?;
            Ok(Zip::from(&p[0]).and(&p[1]).and(mask).map_collect(|&a, &b, &k| C64::new(a * k, b * k)))
        };
        Ok([join(u, &masks[0])?, join(m, &masks[1])?, join(v, &masks[2])?])
    }

    /// Cosine weight matrix `W` (`n x n`).
    pub fn cosine_weights(&self) -> Array2<f64> {
        match &self.cosine {
            CosineParams::Circulant(c) => {
                let n = c.len();
                Array2::from_shape_fn((n, n), |(i, j)| c[(i + n - j) % n])
            }
            CosineParams::Phase { re, im } => {
                let n = re.len();
                Array2::from_shape_fn((n, n), |(i, j)| -(re[i] * re[j] + im[i] * im[j]))
            }
        }
    }

    /// Complex phase diagonal (D-form only).
    pub fn phase_diagonal(&self) -> Option<Vec<C64>> {
        match &self.cosine {
            CosineParams::Phase { re, im } => Some(re.iter().zip(im).map(|(&a, &b)| C64::new(a, b)).collect()),
            CosineParams::Circulant(_) => None,
        }
    }
}

/// Sparsity patterns of the butterfly factors: block-diagonal `U` and `V`,
/// and one diagonal `r x r` payload per block pair in `M`.
pub fn butterfly_masks(n_theta: usize, n_rho: usize, spec: LowRankKernelSpec) -> Result<[Array2<f64>; 3]> {
    spec.validate(n_theta, n_rho)?;
    let (nr, r) = (spec.n_r, spec.r);
    let (bt, br) = (n_theta / nr, n_rho / nr);
    let w = nr * r;
    let mu = Array2::from_shape_fn((n_theta, nr * w), |(a, b)| f64::from(a / bt == b / w));
    let mv = Array2::from_shape_fn((nr * w, n_rho), |(a, b)| f64::from(a / w == b / br));
    let mut mm = Array2::zeros((nr * w, nr * w));
    for i in 0..nr {
        for j in 0..nr {
            for k in 0..r {
                mm[(i * w + j * r + k, j * w + i * r + k)] = 1.0;
            }
        }
    }
    Ok([mu, mm, mv])
}

/// Parameter-dependent quantities shared by every sample of a batch.
#[derive(Debug, Clone)]
struct Prepared {
    /// Full `K_cos`, `K_sin`.
    kc: Array2<f64>,
    ks: Array2<f64>,
    /// Per frequency, the selected columns `[[Kc, Ks], [Ks, -Kc]]`.
    blocks: [Array2<f64>; 2],
    /// Cosine weights tiled to `n x 2n`.
    weight2: Array2<f64>,
    scales: [f64; 4],
    /// Per layer: summed `22`, `12`, `11` filters.
    convs: Vec<[Array2<f64>; 3]>,
    residual: Vec<f64>,
}

/// Intermediate values of one forward evaluation.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    /// Per frequency, the stacked shifted inputs `[Re X, Im X]`, `n^2 x 2n`.
    inputs: Vec<Array2<f64>>,
    /// Per `(w, branch)`, the products `[P1 + P4, P2 - P3]`, `n^2 x 2 n_c`.
    products: Vec<Array2<f64>>,
    /// Per `(w, branch)`, the unscaled channel rows, `n x n_c`.
    rows: Vec<Array2<f64>>,
    /// Input of every convolution layer.
    layer_inputs: Vec<Array2<f64>>,
    /// Output of every layer before the rectifier.
    layer_pre: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Gradient in the intermediate coordinates of [`Prepared`].
#[derive(Debug, Clone)]
struct RawGrad {
    kc: Array2<f64>,
    ks: Array2<f64>,
    weight: Array2<f64>,
    scales: [f64; 4],
    convs: Vec<[Array2<f64>; 3]>,
    residual: Vec<f64>,
}

impl RawGrad {
    fn zeros(net: &Network) -> Self {
        let p = &net.cfg.problem;
        let s = net.cfg.filter_size;
        Self {
            kc: Array2::zeros((p.n_theta, p.n_rho)),
            ks: Array2::zeros((p.n_theta, p.n_rho)),
            weight: Array2::zeros((p.n_theta, p.n_theta)),
            scales: [0.0; 4],
            convs: (0..net.cfg.layers).map(|_| [(); 3].map(|_| Array2::zeros((s, s)))).collect(),
            residual: vec![0.0; net.cfg.layers],
        }
    }

    fn add(&mut self, o: &RawGrad) {
        self.kc += &o.kc;
        self.ks += &o.ks;
        self.weight += &o.weight;
        for (a, b) in self.scales.iter_mut().zip(o.scales) {
            *a += b;
        }
        for (a, b) in self.convs.iter_mut().zip(&o.convs) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.residual.iter_mut().zip(&o.residual) {
            *a += b;
        }
    }
}

/// Fixed structure of the network: configuration, resampling map, column
/// selections and factor masks.
#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: NetConfig,
    resampler: PolarResampler,
    cols: [Vec<usize>; 2],
    masks: Option<[Array2<f64>; 3]>,
}

impl Network {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let p = &cfg.problem;
        let cols = [freq_select_map(p.omega1, p)?, freq_select_map(p.omega2, p)?];
        let masks = match cfg.kernel {
            KernelMode::Dense => None,
            KernelMode::Butterfly(spec) => Some(butterfly_masks(p.n_theta, p.n_rho, spec)?),
        };
        Ok(Self { cfg, resampler: PolarResampler::new(p), cols, masks })
    }

    pub fn masks(&self) -> Option<&[Array2<f64>; 3]> {
        self.masks.as_ref()
    }

    /// Parameters of the given initialization. `Exact` ignores the seed.
    pub fn init_params(&self, init: Init, seed: u64) -> Result<NetParams> {
        let mut p = self.exact_phi_params(DEFAULT_IMPULSE_GAIN)?;
        if init == Init::Random {
            let mut rng = stream(seed, 0, field::PARAMS);
            for (_, mut t) in p.tensors_mut() {
                let spread = t.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-3);
                for v in t.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = spread * z / 3.0;
                }
            }
        }
        Ok(p)
    }

    /// Exact polar adjoint weights followed by identity-like layers: every
    /// layer's `11` and `22` filters of frequency 0 are `gain` times the
    /// discrete Dirac (unit impulse over the cell area), and the residual
    /// scale is `1 - gain`.
    pub fn exact_phi_params(&self, gain: f64) -> Result<NetParams> {
        let p = &self.cfg.problem;
        let k = kernel_matrix(p);
        let kernel = match self.cfg.kernel {
            KernelMode::Dense => {
                let (cos, sin) = split_kernel(k.view());
                KernelParams::Dense { cos, sin }
            }
            KernelMode::Butterfly(spec) => {
                let (_, bf) = block_truncate(k.view(), spec)?;
                let split = |a: Array2<C64>| [a.mapv(|z| z.re), a.mapv(|z| z.im)];
                let [u, m, v] = bf.dense_factors();
                KernelParams::Factored { u: split(u), m: split(m), v: split(v) }
            }
        };
        let cosine = match self.cfg.cosine {
            CosineParam::Circulant => CosineParams::Circulant(cosine_matrix(p.n_theta).column(0).to_owned()),
            CosineParam::Phase => {
                let d = diag_phase(p.n_theta);
                CosineParams::Phase {
                    re: d.iter().map(|z| z.re).collect(),
                    im: d.iter().map(|z| z.im).collect(),
                }
            }
        };
        let sc = initial_scales(p);
        let scales = Array1::from(vec![sc[0][0], sc[0][1], sc[1][0], sc[1][1]]);
        let s = self.cfg.filter_size;
        let c = s / 2;
        let area = self.cell_area();
        let layers = (0..self.cfg.layers)
            .map(|_| {
                let mut filters = vec![Array2::zeros((s, s)); FILTERS_PER_LAYER];
                filters[0][(c, c)] = gain / area;
                filters[2][(c, c)] = gain / area;
                ConvLayer { filters, scale: Array1::from(vec![1.0 - gain]) }
            })
            .collect();
        Ok(NetParams { kernel, cosine, scales, layers })
    }

    /// Exact polar adjoint followed by the two exact residual deconvolution
    /// layers (sampled filters, residuals `alpha` and
    /// `alpha^-2`) and identity layers after them. Needs full-size filters
    /// `2 n_c - 1` and at least two layers.
    pub fn exact_deconv_params(&self) -> Result<NetParams> {
        let p = &self.cfg.problem;
        let n = p.n_c;
        if self.cfg.filter_size != 2 * n - 1 {
            return arg(format!("exact deconvolution filters need size {}, got {}", 2 * n - 1, self.cfg.filter_size));
        }
        if self.cfg.layers < 2 {
            return arg("exact deconvolution needs at least two layers");
        }
        let mut params = self.exact_phi_params(0.0)?;
        let bank = FilterBank::new(p, DEFAULT_NQ)?;
        let g2a = TorusSolver::new(p, DEFAULT_PAD, p.alpha)?.g2_alpha_kernel();
        // Filter index k covers lag k - (n - 1), i.e. bank index k + 1.
        let crop = |g: &Array2<f64>, a: f64| g.slice(s![1.., 1..]).mapv(|v| a * v);
        let kinds = [(1, 1), (1, 2), (2, 2)];
        for w in 0..2 {
            for (t, &(j, jp)) in kinds.iter().enumerate() {
                params.layers[0].filters[3 * w + t] = crop(bank.get(j, jp, w), 1.0);
            }
        }
        params.layers[0].scale[0] = p.alpha;
        params.layers[1].filters[0] = crop(&g2a, -1.0);
        params.layers[1].filters[2] = crop(&g2a, -1.0);
        params.layers[1].scale[0] = 1.0 / (p.alpha * p.alpha);
        for layer in params.layers.iter_mut().skip(2) {
            layer.scale[0] = 1.0;
        }
        Ok(params)
    }

    /// [`Network::exact_phi_params`] with the overall CNN gain set to the
    /// least-squares scalar that best maps the identity-CNN outputs onto the
    /// targets of `samples`. Every layer's residual and impulse are scaled by
    /// the same factor `|c|^(1/L)`; a negative `c` flips the first layer.
    pub fn calibrated_phi_params(&self, gain: f64, samples: &[DatasetSample]) -> Result<NetParams> {
        if samples.is_empty() {
            return arg("gain calibration needs a nonempty set");
        }
        let mut params = self.exact_phi_params(gain)?;
        let prep = self.prepare(&params)?;
        let parts = samples
            .par_iter()
            .map(|s| {
                let (y, _) = self.forward_prepared(&prep, &s.input)?;
                Ok(((&y * &s.target.data).sum(), (&y * &y).sum()))
            })
            .collect::<Result<Vec<(f64, f64)>>>()?;
        let (num, den) = parts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
        if den == 0.0 || num == 0.0 {
            return Err(Error::Numerical("identity network output is orthogonal to the targets".into()));
        }
        let c = num / den;
        let f = c.abs().powf(1.0 / self.cfg.layers as f64);
        for (l, layer) in params.layers.iter_mut().enumerate() {
            let g = if l == 0 { f * c.signum() } else { f };
            layer.scale[0] *= g;
            for filter in layer.filters.iter_mut() {
                filter.mapv_inplace(|v| v * g);
            }
        }
        Ok(params)
    }

    /// Pixel cell area. Layer convolutions are quadrature sums, so filters
    /// hold kernel samples rather than kernel samples times the area.
    pub fn cell_area(&self) -> f64 {
        (2.0 / self.cfg.problem.n_c as f64).powi(2)
    }

    /// Check that `params` has this network's shapes.
    pub fn check_params(&self, params: &NetParams) -> Result<()> {
        let template = self.exact_phi_params_shapes();
        let got = params.tensors();
        if got.len() != template.len() {
            return arg(format!("expected {} parameter tensors, got {}", template.len(), got.len()));
        }
        for ((name, t), (tn, shape)) in got.iter().zip(&template) {
            if name != tn || t.shape() != shape.as_slice() {
                return arg(format!("parameter {name} has shape {:?}, expected {tn} {:?}", t.shape(), shape));
            }
        }
        Ok(())
    }

    fn exact_phi_params_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let p = &self.cfg.problem;
        let mut v: Vec<(String, Vec<usize>)> = Vec::new();
        match (self.cfg.kernel, &self.masks) {
            (KernelMode::Butterfly(_), Some([mu, mm, mv])) => {
                for (name, m) in [("U", mu), ("M", mm), ("V", mv)] {
                    v.push((format!("{name}_re"), m.shape().to_vec()));
                    v.push((format!("{name}_im"), m.shape().to_vec()));
                }
            }
            _ => {
                v.push(("K_cos".into(), vec![p.n_theta, p.n_rho]));
                v.push(("K_sin".into(), vec![p.n_theta, p.n_rho]));
            }
        }
        match self.cfg.cosine {
            CosineParam::Circulant => v.push(("C".into(), vec![p.n_theta])),
            CosineParam::Phase => {
                v.push(("D_re".into(), vec![p.n_theta]));
                v.push(("D_im".into(), vec![p.n_theta]));
            }
        }
        v.push(("scales".into(), vec![4]));
        let s = self.cfg.filter_size;
        for i in 0..self.cfg.layers {
            for j in 0..FILTERS_PER_LAYER {
                v.push((format!("cnn.layer{i}.filter{j}"), vec![s, s]));
            }
            v.push((format!("cnn.layer{i}.scale"), vec![1]));
        }
        v
    }

    fn prepare(&self, params: &NetParams) -> Result<Prepared> {
        self.check_params(params)?;
        let (kc, ks) = params.kernel_split(self.masks.as_ref())?;
        let blocks = [0, 1].map(|w| {
            let c = kc.select(Axis(1), &self.cols[w]);
            let s = ks.select(Axis(1), &self.cols[w]);
            let top = concatenate![Axis(1), c, s];
            let bot = concatenate![Axis(1), s, c.mapv(|x| -x)];
            concatenate![Axis(0), top, bot]
        });
        let wgt = params.cosine_weights();
        let weight2 = concatenate![Axis(1), wgt, wgt];
        let sc = &params.scales;
        let area = self.cell_area();
        let convs = params
            .layers
            .iter()
            .map(|l| {
                let f = &l.filters;
                [(&f[2] + &f[5]) * area, (&f[1] + &f[4]) * area, (&f[0] + &f[3]) * area]
            })
            .collect();
        let residual = params.layers.iter().map(|l| l.scale[0]).collect();
        Ok(Prepared { kc, ks, blocks, weight2, scales: [sc[0], sc[1], sc[2], sc[3]], convs, residual })
    }

    /// Polar output of the adjoint stage, `2 n_theta x n_c`.
    pub fn phi_polar(&self, params: &NetParams, lam: &FarField) -> Result<Array2<f64>> {
        let prep = self.prepare(params)?;
        let mut cache = ForwardCache::default();
        self.phi_forward(&prep, lam, &mut cache)
    }

    fn phi_forward(&self, prep: &Prepared, lam: &FarField, cache: &mut ForwardCache) -> Result<Array2<f64>> {
        let p = &self.cfg.problem;
        check_shape("far field", lam.data.dim(), p.data_shape())?;
        let n = p.n_theta;
        let nc = p.n_c;
        let (cp, sp) = (KAPPA_BAR_PHASE.cos(), KAPPA_BAR_PHASE.sin());
        let mut polar = Array2::zeros(p.polar_shape());
        for w in 0..2 {
            let blk = lam.block(w);
            // Row (m - 1) n + i holds row i of the shift by m.
            let a1 = Array2::from_shape_fn((n * n, 2 * n), |(r, col)| {
                let (m, i) = (r / n + 1, r % n);
                let j = col % n;
                let z = blk[((i + m) % n, (j + m) % n)];
                if col < n {
                    z.re
                } else {
                    z.im
                }
            });
            let kc = prep.kc.select(Axis(1), &self.cols[w]);
            let ks = prep.ks.select(Axis(1), &self.cols[w]);
            for branch in 0..2 {
                let q = if branch == 0 {
                    weighted(&a1, &prep.weight2, n).dot(&prep.blocks[w])
                } else {
                    a1.dot(&prep.blocks[w])
                };
                let mut rows = Array2::zeros((n, nc));
                for m in 0..n {
                    let q1 = q.slice(s![m * n..(m + 1) * n, ..nc]);
                    let q2 = q.slice(s![m * n..(m + 1) * n, nc..]);
                    let mut row = rows.row_mut(m);
                    for j in 0..nc {
                        let (mut re, mut im) = (0.0, 0.0);
                        for i in 0..n {
                            let (c, s) = (kc[(i, j)], ks[(i, j)]);
                            re += c * q1[(i, j)] + s * q2[(i, j)];
                            im += s * q1[(i, j)] - c * q2[(i, j)];
                        }
                        row[j] = cp * re - sp * im;
                    }
                }
                polar.slice_mut(s![branch * n..(branch + 1) * n, ..]).scaled_add(prep.scales[2 * branch + w], &rows);
                cache.products.push(q);
                cache.rows.push(rows);
            }
            cache.inputs.push(a1);
        }
        Ok(polar)
    }

    fn forward_prepared(&self, prep: &Prepared, lam: &FarField) -> Result<(Array2<f64>, ForwardCache)> {
        let mut cache = ForwardCache::default();
        let polar = self.phi_forward(prep, lam, &mut cache)?;
        let mut x = self.resampler.apply(polar.view())?;
        let last = prep.convs.len() - 1;
        for (l, (k, &res)) in prep.convs.iter().zip(&prep.residual).enumerate() {
            let y = block_layer(&x, k, res);
            cache.layer_inputs.push(x);
            x = if self.cfg.rectifier && l < last { y.mapv(|v| v.max(0.0)) } else { y.clone() };
            cache.layer_pre.push(y);
        }
        Ok((x, cache))
    }

    /// Prediction and cached activations.
    pub fn forward_pass(&self, params: &NetParams, lam: &FarField) -> Result<(CoefPair, ForwardCache)> {
        let prep = self.prepare(params)?;
        let (out, cache) = self.forward_prepared(&prep, lam)?;
        Ok((CoefPair::new(out, &self.cfg.problem)?, cache))
    }

    pub fn predict(&self, params: &NetParams, lam: &FarField) -> Result<CoefPair> {
        Ok(self.forward_pass(params, lam)?.0)
    }

    fn backward_raw(&self, prep: &Prepared, cache: &ForwardCache, grad_out: ArrayView2<'_, f64>) -> Result<RawGrad> {
        if cache.is_empty() || cache.layer_inputs.len() != prep.convs.len() {
            return Err(Error::State("backward pass needs the cache of a forward pass".into()));
        }
        let p = &self.cfg.problem;
        check_shape("output gradient", grad_out.dim(), p.coef_shape())?;
        let mut g = RawGrad::zeros(self);
        let last = prep.convs.len() - 1;
        let mut gx = grad_out.to_owned();
        for l in (0..prep.convs.len()).rev() {
            if self.cfg.rectifier && l < last {
                gx.zip_mut_with(&cache.layer_pre[l], |v, &pre| {
                    if pre <= 0.0 {
                        *v = 0.0;
                    }
                });
            }
            let (gin, gk, gres) = block_layer_backward(&cache.layer_inputs[l], &prep.convs[l], prep.residual[l], &gx);
            g.convs[l] = gk;
            g.residual[l] = gres;
            gx = gin;
        }
        let gpolar = self.resampler.apply_transpose(gx.view())?;
        self.phi_backward(prep, cache, &gpolar, &mut g);
        Ok(g)
    }

    fn phi_backward(&self, prep: &Prepared, cache: &ForwardCache, gpolar: &Array2<f64>, g: &mut RawGrad) {
        let p = &self.cfg.problem;
        let n = p.n_theta;
        let nc = p.n_c;
        let (cp, sp) = (KAPPA_BAR_PHASE.cos(), KAPPA_BAR_PHASE.sin());
        for w in 0..2 {
            let a1 = &cache.inputs[w];
            let kc = prep.kc.select(Axis(1), &self.cols[w]);
            let ks = prep.ks.select(Axis(1), &self.cols[w]);
            let mut gkc = Array2::<f64>::zeros((n, nc));
            let mut gks = Array2::<f64>::zeros((n, nc));
            for branch in 0..2 {
                let idx = 2 * w + branch;
                let q = &cache.products[idx];
                let rows = &cache.rows[idx];
                let grow = gpolar.slice(s![branch * n..(branch + 1) * n, ..]);
                let sc = prep.scales[2 * branch + w];
                g.scales[2 * branch + w] += (&grow * rows).sum();
                let mut dq = Array2::<f64>::zeros((n * n, 2 * nc));
                for m in 0..n {
                    for i in 0..n {
                        let r = m * n + i;
                        for j in 0..nc {
                            let gu = sc * grow[(m, j)];
                            let (gr, gi) = (cp * gu, -sp * gu);
                            let (c, s) = (kc[(i, j)], ks[(i, j)]);
                            let (q1, q2) = (q[(r, j)], q[(r, nc + j)]);
                            dq[(r, j)] = c * gr + s * gi;
                            dq[(r, nc + j)] = s * gr - c * gi;
                            gkc[(i, j)] += q1 * gr - q2 * gi;
                            gks[(i, j)] += q2 * gr + q1 * gi;
                        }
                    }
                }
                let a = if branch == 0 { weighted(a1, &prep.weight2, n) } else { a1.clone() };
                let z = a.t().dot(&dq);
                gkc += &(&z.slice(s![..n, ..nc]) - &z.slice(s![n.., nc..]));
                gks += &(&z.slice(s![..n, nc..]) + &z.slice(s![n.., ..nc]));
                if branch == 0 && self.cfg.train_cosine {
                    let ga = dq.dot(&prep.blocks[w].t());
                    for m in 0..n {
                        for i in 0..n {
                            let r = m * n + i;
                            for j in 0..n {
                                g.weight[(i, j)] += ga[(r, j)] * a1[(r, j)] + ga[(r, n + j)] * a1[(r, n + j)];
                            }
                        }
                    }
                }
            }
            for (jj, &col) in self.cols[w].iter().enumerate() {
                let mut dc = g.kc.column_mut(col);
                dc += &gkc.column(jj);
                let mut ds = g.ks.column_mut(col);
                ds += &gks.column(jj);
            }
        }
    }

    /// Map an intermediate gradient to parameter coordinates.
    fn finish_grad(&self, params: &NetParams, raw: &RawGrad) -> Result<NetParams> {
        let mut out = params.zeros_like();
        match (&mut out.kernel, &self.masks) {
            (KernelParams::Dense { cos, sin }, _) => {
                cos.assign(&raw.kc);
                sin.assign(&raw.ks);
            }
            (KernelParams::Factored { u, m, v }, Some(masks)) => {
                let [fu, fm, fv] = params.masked_factors(masks)?;
                let gk = Zip::from(&raw.kc).and(&raw.ks).map_collect(|&c, &s| C64::new(c, -s));
                let mv = fm.dot(&fv);
                let um = fu.dot(&fm);
                let gu = gk.dot(&conj_t(mv.view()));
                let gm = conj_t(fu.view()).dot(&gk).dot(&conj_t(fv.view()));
                let gv = conj_t(um.view()).dot(&gk);
                for (dst, src, mask) in [(u, gu, &masks[0]), (m, gm, &masks[1]), (v, gv, &masks[2])] {
                    dst[0] = Zip::from(&src).and(mask).map_collect(|z, &k| z.re * k);
                    dst[1] = Zip::from(&src).and(mask).map_collect(|z, &k| z.im * k);
                }
            }
            (KernelParams::Factored { .. }, None) => return Err(Error::State("factored kernel needs structural masks".into())),
        }
        if self.cfg.train_cosine {
            let gw = &raw.weight;
            let n = gw.nrows();
            match (&mut out.cosine, &params.cosine) {
                (CosineParams::Circulant(gc), _) => {
                    for i in 0..n {
                        for j in 0..n {
                            gc[(i + n - j) % n] += gw[(i, j)];
                        }
                    }
                }
                (CosineParams::Phase { re: ga, im: gb }, CosineParams::Phase { re: a, im: b }) => {
                    let sym = gw + &gw.t();
                    ga.assign(&(-sym.dot(a)));
                    gb.assign(&(-sym.dot(b)));
                }
                _ => return Err(Error::Invariant("cosine parameter kinds differ".into())),
            }
        }
        out.scales.assign(&Array1::from(raw.scales.to_vec()));
        let area = self.cell_area();
        for (layer, (k, &r)) in out.layers.iter_mut().zip(raw.convs.iter().zip(&raw.residual)) {
            // Slots 22, 12, 11 feed filters 2 + 3w, 1 + 3w, 0 + 3w.
            for w in 0..2 {
                layer.filters[3 * w + 2].assign(&(&k[0] * area));
                layer.filters[3 * w + 1].assign(&(&k[1] * area));
                layer.filters[3 * w].assign(&(&k[2] * area));
            }
            layer.scale[0] = r;
        }
        Ok(out)
    }

    /// Exact reverse-mode gradient of `<grad_out, h(lam)>` with respect to
    /// every parameter.
    pub fn backward_pass(&self, params: &NetParams, cache: &ForwardCache, grad_out: ArrayView2<'_, f64>) -> Result<NetParams> {
        let prep = self.prepare(params)?;
        let raw = self.backward_raw(&prep, cache, grad_out)?;
        self.finish_grad(params, &raw)
    }

    /// Summed loss and gradient over a batch. Per-sample work runs in
    /// parallel; the reduction runs in sample order.
    pub fn batch_gradient(&self, params: &NetParams, batch: &[&DatasetSample]) -> Result<(f64, NetParams)> {
        let prep = self.prepare(params)?;
        let parts = batch
            .par_iter()
            .map(|sample| {
                let (pred, cache) = self.forward_prepared(&prep, &sample.input)?;
                let l = frob((&pred - &sample.target.data).view());
                let go = loss_grad_raw(&pred, &sample.target.data);
                Ok((l, self.backward_raw(&prep, &cache, go.view())?))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = 0.0;
        let mut acc = RawGrad::zeros(self);
        for (l, g) in &parts {
            total += l;
            acc.add(g);
        }
        Ok((total, self.finish_grad(params, &acc)?))
    }

    /// Aggregate relative error `sum ||h(lam) - target|| / sum ||target||`.
    pub fn relative_error(&self, params: &NetParams, samples: &[DatasetSample]) -> Result<f64> {
        if samples.is_empty() {
            return arg("relative error needs a nonempty set");
        }
        let prep = self.prepare(params)?;
        let parts = samples
            .par_iter()
            .map(|s| {
                let (pred, _) = self.forward_prepared(&prep, &s.input)?;
                Ok((frob((&pred - &s.target.data).view()), frob(s.target.data.view())))
            })
            .collect::<Result<Vec<_>>>()?;
        let (num, den) = parts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
        Ok(if den == 0.0 { num } else { num / den })
    }
}

/// `a .* [W W]` repeated over the `n` shift blocks.
fn weighted(a1: &Array2<f64>, w2: &Array2<f64>, n: usize) -> Array2<f64> {
    let mut a = a1.clone();
    for m in 0..n {
        let mut blk = a.slice_mut(s![m * n..(m + 1) * n, ..]);
        blk *= w2;
    }
    a
}

/// Offsets `(dst range, src range)` for a shift by `d` on a length-`n` axis:
/// `dst[p] <- src[p + d]`.
fn shift_ranges(n: usize, d: isize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    if d >= 0 {
        let d = d as usize;
        (0..n.saturating_sub(d), d.min(n)..n)
    } else {
        let d = (-d) as usize;
        (d.min(n)..n, 0..n.saturating_sub(d))
    }
}

/// Zero-padded "same" convolution `out[p] = sum_k f[k] x[p - k + c]`.
pub fn conv_same(f: &Array2<f64>, x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    conv_same_acc(f, x, 1.0, &mut out);
    out
}

fn conv_same_acc(f: &Array2<f64>, x: &Array2<f64>, sign: f64, out: &mut Array2<f64>) {
    let (n0, n1) = x.dim();
    let c = (f.nrows() / 2) as isize;
    for ((ka, kb), &v) in f.indexed_iter() {
        if v == 0.0 {
            continue;
        }
        let (r0, s0) = shift_ranges(n0, c - ka as isize);
        let (r1, s1) = shift_ranges(n1, c - kb as isize);
        if r0.is_empty() || r1.is_empty() {
            continue;
        }
        let mut dst = out.slice_mut(s![r0, r1]);
        dst.scaled_add(sign * v, &x.slice(s![s0, s1]));
    }
}

/// Transpose of [`conv_same`] in `x`: `gx[q] += sum_k f[k] g[q + k - c]`.
fn conv_same_transpose_acc(f: &Array2<f64>, g: &Array2<f64>, sign: f64, gx: &mut Array2<f64>) {
    let (n0, n1) = g.dim();
    let c = (f.nrows() / 2) as isize;
    for ((ka, kb), &v) in f.indexed_iter() {
        if v == 0.0 {
            continue;
        }
        let (r0, s0) = shift_ranges(n0, c - ka as isize);
        let (r1, s1) = shift_ranges(n1, c - kb as isize);
        if r0.is_empty() || r1.is_empty() {
            continue;
        }
        let mut dst = gx.slice_mut(s![s0, s1]);
        dst.scaled_add(sign * v, &g.slice(s![r0, r1]));
    }
}

/// Gradient of [`conv_same`] in `f`: `gf[k] = sum_p g[p] x[p - k + c]`.
fn conv_same_filter_grad(g: &Array2<f64>, x: &Array2<f64>, size: usize) -> Array2<f64> {
    let (n0, n1) = x.dim();
    let c = (size / 2) as isize;
    let gs = g.as_standard_layout();
    let xs = x.as_standard_layout();
    let (gs, xs) = (gs.as_slice().expect("standard layout"), xs.as_slice().expect("standard layout"));
    Array2::from_shape_fn((size, size), |(ka, kb)| {
        let (r0, s0) = shift_ranges(n0, c - ka as isize);
        let (r1, s1) = shift_ranges(n1, c - kb as isize);
        let mut acc = 0.0;
        for (p0, q0) in r0.zip(s0) {
            let gr = &gs[p0 * n1 + r1.start..p0 * n1 + r1.end];
            let xr = &xs[q0 * n1 + s1.start..q0 * n1 + s1.end];
            acc += gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
        }
        acc
    })
}

fn split_channels(x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let n = x.ncols();
    (x.slice(s![..n, ..]).to_owned(), x.slice(s![n.., ..]).to_owned())
}

/// One layer: `(A*x1 - B*x2 + r x1, -B*x1 + C*x2 + r x2)`, `k = [A, B, C]`.
fn block_layer(x: &Array2<f64>, k: &[Array2<f64>; 3], res: f64) -> Array2<f64> {
    let (x1, x2) = split_channels(x);
    let mut y1 = x1.mapv(|v| res * v);
    let mut y2 = x2.mapv(|v| res * v);
    conv_same_acc(&k[0], &x1, 1.0, &mut y1);
    conv_same_acc(&k[1], &x2, -1.0, &mut y1);
    conv_same_acc(&k[1], &x1, -1.0, &mut y2);
    conv_same_acc(&k[2], &x2, 1.0, &mut y2);
    concatenate![Axis(0), y1, y2]
}

fn block_layer_backward(x: &Array2<f64>, k: &[Array2<f64>; 3], res: f64, gy: &Array2<f64>) -> (Array2<f64>, [Array2<f64>; 3], f64) {
    let (x1, x2) = split_channels(x);
    let (g1, g2) = split_channels(gy);
    let mut gx1 = g1.mapv(|v| res * v);
    let mut gx2 = g2.mapv(|v| res * v);
    conv_same_transpose_acc(&k[0], &g1, 1.0, &mut gx1);
    conv_same_transpose_acc(&k[1], &g1, -1.0, &mut gx2);
    conv_same_transpose_acc(&k[1], &g2, -1.0, &mut gx1);
    conv_same_transpose_acc(&k[2], &g2, 1.0, &mut gx2);
    let s = k[0].nrows();
    let ga = conv_same_filter_grad(&g1, &x1, s);
    let gb = -(conv_same_filter_grad(&g1, &x2, s) + conv_same_filter_grad(&g2, &x1, s));
    let gc = conv_same_filter_grad(&g2, &x2, s);
    let gres = (gy * x).sum();
    (concatenate![Axis(0), gx1, gx2], [ga, gb, gc], gres)
}

/// Frobenius distance of prediction and target.
pub fn loss(pred: &CoefPair, target: &CoefPair) -> Result<f64> {
    check_shape("prediction", pred.data.dim(), target.data.dim())?;
    Ok(frob((&pred.data - &target.data).view()))
}

/// Gradient of [`loss`] in the prediction, zero where the loss is zero.
pub fn loss_grad(pred: &CoefPair, target: &CoefPair) -> Result<Array2<f64>> {
    check_shape("prediction", pred.data.dim(), target.data.dim())?;
    Ok(loss_grad_raw(&pred.data, &target.data))
}

fn loss_grad_raw(pred: &Array2<f64>, target: &Array2<f64>) -> Array2<f64> {
    let e = pred - target;
    let norm = frob(e.view());
    if norm == 0.0 {
        e
    } else {
        e / norm
    }
}

/// Summed loss over a batch.
pub fn batch_loss(preds: &[CoefPair], targets: &[CoefPair]) -> Result<f64> {
    if preds.len() != targets.len() {
        return arg(format!("{} predictions for {} targets", preds.len(), targets.len()));
    }
    preds.iter().zip(targets).map(|(p, t)| loss(p, t)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.005, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub first: NetParams,
    pub second: NetParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, params: &NetParams) -> Self {
        Self { cfg, first: params.zeros_like(), second: params.zeros_like(), step: 0 }
    }

    pub fn update(&mut self, params: &mut NetParams, grad: &NetParams) {
        self.step += 1;
        let c = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let tensors = params.tensors_mut().into_iter().zip(self.first.tensors_mut()).zip(self.second.tensors_mut()).zip(grad.tensors());
        for ((((_, mut p), (_, mut m)), (_, mut v)), (_, g)) in tensors {
            ndarray::Zip::from(&mut p).and(&mut m).and(&mut v).and(&g).for_each(|p, m, v, &g| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= c.lr * mh / (vh.sqrt() + c.eps);
            });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { adam: AdamConfig::default(), batch: 50, steps: 300, seed: 0 }
    }
}

/// Outcome of a training run. All fields except `wall_time` are
/// deterministic given the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Summed batch loss before each update.
    pub losses: Vec<f64>,
    pub e_a_init: f64,
    pub e_g_init: f64,
    pub e_a: f64,
    pub e_g: f64,
    pub wall_time: f64,
    pub seed: u64,
    pub steps: usize,
}

impl TrainReport {
    /// Equality of every deterministic field, bitwise.
    pub fn same_outcome(&self, o: &TrainReport) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        bits(&self.losses) == bits(&o.losses)
            && bits(&[self.e_a_init, self.e_g_init, self.e_a, self.e_g]) == bits(&[o.e_a_init, o.e_g_init, o.e_a, o.e_g])
            && self.seed == o.seed
            && self.steps == o.steps
    }
}

/// Batch order for one epoch.
fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut stream(seed, epoch, field::SHUFFLE));
    idx
}

/// Adam training on the summed Frobenius loss. Batches walk a fresh
/// permutation per epoch; a short tail batch is skipped.
pub fn train(
    net: &Network,
    params0: &NetParams,
    train_set: &[DatasetSample],
    test_set: &[DatasetSample],
    cfg: &TrainConfig,
) -> Result<(NetParams, TrainReport)> {
    if train_set.is_empty() || test_set.is_empty() {
        return arg("training needs nonempty training and test sets");
    }
    if cfg.batch == 0 {
        return arg("batch size must be positive");
    }
    let start = Instant::now();
    let batch = cfg.batch.min(train_set.len());
    let per_epoch = train_set.len() / batch;
    let mut params = params0.clone();
    let mut adam = AdamState::new(cfg.adam, &params);
    let e_a_init = net.relative_error(&params, train_set)?;
    let e_g_init = net.relative_error(&params, test_set)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut order = Vec::new();
    for step in 0..cfg.steps {
        let epoch = step / per_epoch;
        let slot = step % per_epoch;
        if slot == 0 {
            order = epoch_order(train_set.len(), cfg.seed, epoch as u64);
        }
        let members: Vec<&DatasetSample> = order[slot * batch..(slot + 1) * batch].iter().map(|&i| &train_set[i]).collect();
        let (l, g) = net.batch_gradient(&params, &members)?;
        losses.push(l);
        adam.update(&mut params, &g);
    }
    let e_a = net.relative_error(&params, train_set)?;
    let e_g = net.relative_error(&params, test_set)?;
    let report = TrainReport {
        losses,
        e_a_init,
        e_g_init,
        e_a,
        e_g,
        wall_time: start.elapsed().as_secs_f64(),
        seed: cfg.seed,
        steps: cfg.steps,
    };
    Ok((params, report))
}

/// `(e_a, e_g, e_g - e_a)`.
pub fn generalization_gap(net: &Network, params: &NetParams, train_set: &[DatasetSample], test_set: &[DatasetSample]) -> Result<(f64, f64, f64)> {
    if train_set.is_empty() || test_set.is_empty() {
        return arg("generalization gap needs nonempty sets");
    }
    let e_a = net.relative_error(params, train_set)?;
    let e_g = net.relative_error(params, test_set)?;
    Ok((e_a, e_g, e_g - e_a))
}

/// A generic parameter point for derivative checks: the exact
/// initialization with every tensor perturbed by Gaussian noise of standard
/// deviation `0.1 * max(|t|_max, 1)`, so no rectifier input sits near zero
/// by construction.
pub fn probe_params(net: &Network, seed: u64) -> Result<NetParams> {
    let mut p = net.exact_phi_params(DEFAULT_IMPULSE_GAIN)?;
    let mut rng = stream(seed, 1, field::PARAMS);
    for (_, mut t) in p.tensors_mut() {
        let sd = 0.1 * t.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        for v in t.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += sd * z;
        }
    }
    Ok(p)
}

/// Worst relative discrepancy per tensor between the analytic gradient and
/// central differences of the summed loss over `samples`, on `entries`
/// random entries per tensor (drawn inside the structural support of masked
/// factors). The denominator is `max(|analytic|, |numeric|, 1e-6 * G)` with
/// `G` the largest analytic gradient entry over all tensors, so entries far
/// below the difference quotient's rounding floor are compared absolutely.
pub fn finite_difference_check(
    net: &Network,
    params: &NetParams,
    samples: &[DatasetSample],
    step: f64,
    entries: usize,
    seed: u64,
) -> Result<Vec<(String, f64)>> {
    if samples.is_empty() {
        return arg("gradient check needs at least one sample");
    }
    let refs: Vec<&DatasetSample> = samples.iter().collect();
    let (_, grad) = net.batch_gradient(params, &refs)?;
    let loss_at = |p: &NetParams| -> Result<f64> {
        let prep = net.prepare(p)?;
        samples.iter().map(|s| Ok(frob((&net.forward_prepared(&prep, &s.input)?.0 - &s.target.data).view()))).sum()
    };
    let mut rng = stream(seed, 0, field::PROBE);
    let supports: Vec<Option<Vec<f64>>> = {
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
        names
            .iter()
            .map(|n| {
                let masks = net.masks()?;
                let i = match n.as_str() {
                    "U_re" | "U_im" => 0,
                    "M_re" | "M_im" => 1,
                    "V_re" | "V_im" => 2,
                    _ => return None,
                };
                Some(masks[i].iter().copied().collect())
            })
            .collect()
    };
    let gts = grad.tensors();
    let gmax = grad.max_abs();
    let mut out = Vec::with_capacity(gts.len());
    for (t, (name, g)) in gts.iter().enumerate() {
        let flat: Vec<f64> = g.iter().copied().collect();
        let candidates: Vec<usize> = match &supports[t] {
            Some(mask) => (0..flat.len()).filter(|&i| mask[i] != 0.0).collect(),
            None => (0..flat.len()).collect(),
        };
        let mut worst = 0.0f64;
        for _ in 0..entries {
            let e = candidates[rand::Rng::random_range(&mut rng, 0..candidates.len())];
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus.tensors_mut()[t].1.iter_mut().nth(e).map(|v| *v += step);
            minus.tensors_mut()[t].1.iter_mut().nth(e).map(|v| *v -= step);
            let numeric = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * step);
            let analytic = flat[e];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6 * gmax);
            let rel = if denom == 0.0 { 0.0 } else { (analytic - numeric).abs() / denom };
            worst = worst.max(rel);
        }
        out.push((name.clone(), worst));
    }
    Ok(out)
}

/// Parameters of the polar adjoint stage that enter the Lipschitz bounds.
#[derive(Debug, Clone)]
pub enum AdjointKernel {
    Dense(Array2<C64>),
    /// Butterfly factors `U M V`.
    Factored([Array2<C64>; 3]),
}

impl AdjointKernel {
    pub fn dense(&self) -> Array2<C64> {
        match self {
            Self::Dense(k) => k.clone(),
            Self::Factored([u, m, v]) => u.dot(m).dot(v),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdjointParams {
    pub kernel: AdjointKernel,
    /// Phase diagonal `D`.
    pub phase: Vec<C64>,
}

/// Norm-ball radii. For a factored kernel `kernel` holds `[B_U, B_M, B_V]`,
/// for a dense kernel only the first entry (`B_K`) is used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzBounds {
    pub kernel: [f64; 3],
    pub phase: f64,
    pub input: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzPairResult {
    pub lhs: f64,
    pub rhs: f64,
    /// Contribution of each kernel factor (one entry for a dense kernel).
    pub kernel_terms: Vec<f64>,
    pub phase_term: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzReport {
    pub pairs: Vec<LipschitzPairResult>,
    /// Constants multiplying `||K - K'||` (or `U`, `M`, `V`) and `||D - D'||`.
    pub kernel_constants: Vec<f64>,
    pub phase_constant: f64,
    pub holds: bool,
}

fn lipschitz_constants(cfg: &ProblemConfig, b: &LipschitzBounds, factored: bool) -> (Vec<f64>, f64) {
    let cw: f64 = cfg.omegas().iter().map(|&om| kappa(om).norm()).sum();
    let base = 8.0 * PI * PI * cw * b.input;
    let root = (b.phase.powi(4) + 1.0).sqrt();
    if factored {
        let [bu, bm, bv] = b.kernel;
        let ckr = base * root * bu * bm * bv;
        let cd = base * b.phase * (bu * bm * bv).powi(2);
        (vec![ckr * bm * bv, ckr * bu * bv, ckr * bu * bm], cd)
    } else {
        let bk = b.kernel[0];
        (vec![base * root * bk], base * b.phase * bk * bk)
    }
}

fn within(x: f64, bound: f64) -> bool {
    x <= bound * (1.0 + 1e-12)
}

fn check_ball(p: &AdjointParams, b: &LipschitzBounds) -> Result<()> {
    let norms: Vec<f64> = match &p.kernel {
        AdjointKernel::Dense(k) => vec![spectral_norm_c(k.view())],
        AdjointKernel::Factored(f) => f.iter().map(|a| spectral_norm_c(a.view())).collect(),
    };
    for (i, nrm) in norms.iter().enumerate() {
        if !within(*nrm, b.kernel[i]) {
            return arg(format!("kernel factor {i} has spectral norm {nrm} above the bound {}", b.kernel[i]));
        }
    }
    let dn = p.phase.iter().fold(0.0f64, |m, z| m.max(z.norm()));
    if !within(dn, b.phase) {
        return arg(format!("phase diagonal has norm {dn} above the bound {}", b.phase));
    }
    Ok(())
}

/// Both sides of the parameter-Lipschitz inequality of the polar adjoint
/// stage with diagonal phase weights:
/// `(sum_s ||phi(lam_s) - phi'(lam_s)||_F^2)^(1/2)
///   <= (c_K ||K - K'||_2 + c_D ||D - D'||_2) n_c^(-3/2) sqrt(N)`,
/// evaluated on the complex network output. Factored kernels use one term
/// per factor. Requires `n_theta = n_c`.
pub fn lipschitz_check(cfg: &ProblemConfig, pairs: &[(AdjointParams, AdjointParams)], inputs: &[FarField], bounds: &LipschitzBounds) -> Result<LipschitzReport> {
    if cfg.n_theta != cfg.n_c {
        return arg("the Lipschitz bound assumes n_theta = n_c");
    }
    if inputs.is_empty() {
        return arg("Lipschitz check needs at least one input");
    }
    for lam in inputs {
        let nrm = frob_c(lam.data.view());
        if !within(nrm, bounds.input) {
            return arg(format!("input norm {nrm} above the bound {}", bounds.input));
        }
    }
    let factored = pairs.first().is_some_and(|(a, _)| matches!(a.kernel, AdjointKernel::Factored(_)));
    let (kconst, dconst) = lipschitz_constants(cfg, bounds, factored);
    let scale = (cfg.n_c as f64).powf(-1.5) * (inputs.len() as f64).sqrt();
    let mut results = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        check_ball(a, bounds)?;
        check_ball(b, bounds)?;
        let kdiff: Vec<f64> = match (&a.kernel, &b.kernel) {
            (AdjointKernel::Dense(x), AdjointKernel::Dense(y)) => vec![spectral_norm_c((x - y).view())],
            (AdjointKernel::Factored(x), AdjointKernel::Factored(y)) => (0..3).map(|i| spectral_norm_c((&x[i] - &y[i]).view())).collect(),
            _ => return arg("a pair mixes dense and factored kernels"),
        };
        if kdiff.len() != kconst.len() {
            return arg("all pairs must share one kernel form");
        }
        let ddiff = a.phase.iter().zip(&b.phase).fold(0.0f64, |m, (x, y)| m.max((x - y).norm()));
        let (ka, kb) = (a.kernel.dense(), b.kernel.dense());
        let mut sq = 0.0;
        for lam in inputs {
            let fa = phi0_apply_with(lam, ka.view(), CosineForm::Phase(&a.phase), cfg)?.value;
            let fb = phi0_apply_with(lam, kb.view(), CosineForm::Phase(&b.phase), cfg)?.value;
            sq += frob_c((&fa - &fb).view()).powi(2);
        }
        let kernel_terms: Vec<f64> = kconst.iter().zip(&kdiff).map(|(c, d)| c * d * scale).collect();
        let phase_term = dconst * ddiff * scale;
        let rhs = kernel_terms.iter().sum::<f64>() + phase_term;
        results.push(LipschitzPairResult { lhs: sq.sqrt(), rhs, kernel_terms, phase_term });
    }
    let holds = results.iter().all(|r| r.lhs <= r.rhs);
    Ok(LipschitzReport { pairs: results, kernel_constants: kconst, phase_constant: dconst, holds })
}

/// Write parameters to a container and the configuration plus step count to
/// the sibling manifest.
pub fn save_checkpoint(path: impl AsRef<Path>, cfg: &NetConfig, params: &NetParams, step: usize) -> Result<()> {
    let mut c = ArrayContainer::new();
    for (name, t) in params.tensors() {
        c.insert_real(name, &t.to_owned())?;
    }
    c.write(path.as_ref())?;
    let mut m = Manifest::new();
    cfg.to_manifest(&mut m)?;
    m.set("step", step)?;
    m.write(manifest_path(path))
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(NetConfig, NetParams, usize)> {
    let m = Manifest::read(manifest_path(path.as_ref()))?;
    let cfg = NetConfig::from_manifest(&m)?;
    let step = m.parse_value("step")?;
    let net = Network::new(cfg)?;
    let mut params = net.exact_phi_params(0.0)?;
    let c = ArrayContainer::read(path.as_ref())?;
    for (name, mut t) in params.tensors_mut() {
        let src = c.real(&name)?;
        if src.shape() != t.shape() {
            return Err(Error::Format(format!("checkpoint array {name} has shape {:?}, expected {:?}", src.shape(), t.shape())));
        }
        t.assign(src);
    }
    Ok((cfg, params, step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{gen_dataset, DatasetSpec};

    fn small_net(kernel: KernelMode, cosine: CosineParam, rectifier: bool) -> Network {
        let p = ProblemConfig::square(16, 0.5).unwrap();
        let mut cfg = NetConfig::new(p);
        cfg.kernel = kernel;
        cfg.cosine = cosine;
        cfg.layers = 3;
        cfg.filter_size = 3;
        cfg.rectifier = rectifier;
        Network::new(cfg).unwrap()
    }

    #[test]
    fn conv_transpose_is_adjoint() {
        let f = Array2::from_shape_fn((5, 5), |(a, b)| (a as f64 * 0.7 - b as f64 * 0.3).sin());
        let x = Array2::from_shape_fn((6, 6), |(a, b)| (a as f64 + 2.0 * b as f64).cos());
        let g = Array2::from_shape_fn((6, 6), |(a, b)| (0.5 * a as f64 - b as f64).sin());
        let lhs = (&conv_same(&f, &x) * &g).sum();
        let mut gx = Array2::zeros((6, 6));
        conv_same_transpose_acc(&f, &g, 1.0, &mut gx);
        let rhs = (&x * &gx).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let gf = conv_same_filter_grad(&g, &x, 5);
        assert!(((&f * &gf).sum() - lhs).abs() < 1e-12);
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let net = small_net(KernelMode::Dense, CosineParam::Circulant, false);
        let p0 = net.init_params(Init::Exact, 0).unwrap();
        let z = p0.zeros_like();
        let data = gen_dataset(&net.cfg.problem, &DatasetSpec::default(), 1, 3).unwrap();
        let out = net.predict(&z, &data[0].input).unwrap();
        assert_eq!(crate::linalg::max_abs(out.data.view()), 0.0);
    }

    #[test]
    fn phase_and_circulant_forms_agree_at_init() {
        let a = small_net(KernelMode::Dense, CosineParam::Circulant, false);
        let b = small_net(KernelMode::Dense, CosineParam::Phase, false);
        let data = gen_dataset(&a.cfg.problem, &DatasetSpec::default(), 1, 4).unwrap();
        let pa = a.phi_polar(&a.init_params(Init::Exact, 0).unwrap(), &data[0].input).unwrap();
        let pb = b.phi_polar(&b.init_params(Init::Exact, 0).unwrap(), &data[0].input).unwrap();
        let (d, m) = (crate::linalg::max_abs((&pa - &pb).view()), crate::linalg::max_abs(pa.view()));
        assert!(d <= 1e-12 * m, "{d} vs {m}");
    }

    #[test]
    fn tensor_names_are_unique() {
        let net = small_net(KernelMode::Butterfly(LowRankKernelSpec { r: 2, n_r: 2 }), CosineParam::Phase, false);
        let p = net.init_params(Init::Exact, 0).unwrap();
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.contains(&"U_re".to_string()));
        assert!(names.contains(&"D_im".to_string()));
    }

    #[test]
    fn backward_requires_cache() {
        let net = small_net(KernelMode::Dense, CosineParam::Circulant, false);
        let p = net.init_params(Init::Exact, 0).unwrap();
        let g = Array2::zeros(net.cfg.problem.coef_shape());
        let err = net.backward_pass(&p, &ForwardCache::default(), g.view()).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn adam_with_zero_gradient_is_identity() {
        let net = small_net(KernelMode::Dense, CosineParam::Circulant, false);
        let mut p = net.init_params(Init::Exact, 0).unwrap();
        let before = p.clone();
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        let z = p.zeros_like();
        adam.update(&mut p, &z);
        assert_eq!(p, before);
    }
}
