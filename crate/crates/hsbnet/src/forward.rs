//! Discretized Born far-field operator, its direct adjoint, synthetic
//! coefficient generators and additive noise.

use std::f64::consts::PI;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use num_complex::Complex64 as C64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{arg, check_shape, Result};
use crate::grid::{angles, CartesianGrid, ProblemConfig};
use crate::linalg::frob_c;
use crate::rng::{field, stream};

/// `e^{i pi/4} omega^2 / sqrt(8 pi omega)`; the forward prefactor.
pub fn kappa(omega: f64) -> C64 {
    C64::from_polar(omega * omega / (8.0 * PI * omega).sqrt(), PI / 4.0)
}

/// Conjugate prefactor used by every adjoint formula.
pub fn kappa_bar(omega: f64) -> C64 {
    kappa(omega).conj()
}

/// Stacked far-field data `(Lambda^{omega1}; Lambda^{omega2})`, `2 n_theta x n_theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct FarField {
    pub data: Array2<C64>,
}

impl FarField {
    pub fn new(data: Array2<C64>, cfg: &ProblemConfig) -> Result<Self> {
        check_shape("far field", data.dim(), cfg.data_shape())?;
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return arg("far field has non-finite entries");
        }
        Ok(Self { data })
    }

    pub fn zeros(cfg: &ProblemConfig) -> Self {
        Self { data: Array2::zeros(cfg.data_shape()) }
    }

    pub fn n_theta(&self) -> usize {
        self.data.ncols()
    }

    /// Block for frequency index `k` (0 for omega1, 1 for omega2).
    pub fn block(&self, k: usize) -> ArrayView2<'_, C64> {
        let n = self.n_theta();
        self.data.slice(s![k * n..(k + 1) * n, ..])
    }
}

/// Stacked real coefficients `(gamma; eta)`, `2 n_c x n_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefPair {
    pub data: Array2<f64>,
}

impl CoefPair {
    pub fn new(data: Array2<f64>, cfg: &ProblemConfig) -> Result<Self> {
        check_shape("coefficient pair", data.dim(), cfg.coef_shape())?;
        Ok(Self { data })
    }

    pub fn zeros(cfg: &ProblemConfig) -> Self {
        Self { data: Array2::zeros(cfg.coef_shape()) }
    }

    pub fn n_c(&self) -> usize {
        self.data.ncols()
    }

    pub fn gamma(&self) -> ArrayView2<'_, f64> {
        let n = self.n_c();
        self.data.slice(s![..n, ..])
    }

    pub fn eta(&self) -> ArrayView2<'_, f64> {
        let n = self.n_c();
        self.data.slice(s![n.., ..])
    }

    /// True when every pixel center outside the unit disc holds zero.
    pub fn is_disc_supported(&self) -> bool {
        let n = self.n_c();
        let grid = CartesianGrid::new(n);
        (0..2 * n).all(|r| (0..n).all(|j| grid.in_disc(r % n, j) || self.data[(r, j)] == 0.0))
    }
}

/// Midpoint/trapezoid discretization of the two-frequency Born operator on a
/// set of sample points (by default the pixel centers).
#[derive(Debug, Clone)]
pub struct BornOperator {
    pub cfg: ProblemConfig,
    n_points: usize,
    weight: f64,
    /// `cos(theta_i - theta_j)`, i.e. `xhat_i . zeta_j`.
    dir_dot: Array2<f64>,
    /// Per frequency, `E[i, p] = exp(-i omega xhat_i . y_p)`.
    phases: [Array2<C64>; 2],
}

impl BornOperator {
    /// Operator on the pixel centers of `cfg`.
    pub fn new(cfg: &ProblemConfig) -> Self {
        let grid = CartesianGrid::new(cfg.n_c);
        Self::with_points(cfg, &grid.points(), grid.cell_area())
    }

    /// Operator sampled at arbitrary points with a uniform quadrature weight.
    pub fn with_points(cfg: &ProblemConfig, points: &[[f64; 2]], weight: f64) -> Self {
        let th = angles(cfg.n_theta);
        let dir_dot = Array2::from_shape_fn((cfg.n_theta, cfg.n_theta), |(i, j)| (th[i] - th[j]).cos());
        let phases = cfg.omegas().map(|om| {
            Array2::from_shape_fn((cfg.n_theta, points.len()), |(i, p)| {
                let [x, y] = points[p];
                C64::from_polar(1.0, -om * (th[i].cos() * x + th[i].sin() * y))
            })
        });
        Self { cfg: *cfg, n_points: points.len(), weight, dir_dot, phases }
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    /// Angular quadrature weight of one `(xhat, zeta)` node pair.
    pub fn angular_weight(&self) -> f64 {
        let d = 2.0 * PI / self.cfg.n_theta as f64;
        d * d
    }

    pub fn point_weight(&self) -> f64 {
        self.weight
    }

    /// Far field of complex point values `gamma`, `eta` (length `n_points`).
    pub fn apply_complex(&self, gamma: &[C64], eta: &[C64]) -> Result<Array2<C64>> {
        if gamma.len() != self.n_points || eta.len() != self.n_points {
            return arg(format!("expected {} point values", self.n_points));
        }
        let n = self.cfg.n_theta;
        let mut out = Array2::zeros((2 * n, n));
        for (k, om) in self.cfg.omegas().into_iter().enumerate() {
            let e = &self.phases[k];
            let eh = e.t().mapv(|z| z.conj());
            let scaled = |v: &[C64]| {
                let mut a = e.clone();
                for (mut col, &x) in a.axis_iter_mut(Axis(1)).zip(v) {
                    col.mapv_inplace(|z| z * x);
                }
                a.dot(&eh)
            };
            let from_eta = scaled(eta);
            let from_gamma = scaled(gamma);
            let pre = kappa(om) * self.weight;
            let mut blk = out.slice_mut(s![k * n..(k + 1) * n, ..]);
            Zip::from(&mut blk).and(&from_eta).and(&from_gamma).and(&self.dir_dot).for_each(|o, &fe, &fg, &d| {
                *o = pre * (fe - fg * d);
            });
        }
        Ok(out)
    }

    /// Far field of a real stacked coefficient pair on the pixel grid.
    pub fn far_field(&self, coef: &CoefPair) -> Result<FarField> {
        let n = self.cfg.n_c;
        check_shape("coefficient pair", coef.data.dim(), (2 * n, n))?;
        if n * n != self.n_points {
            return arg("operator was built on a non-pixel point set");
        }
        let g: Vec<C64> = coef.gamma().iter().map(|&x| C64::new(x, 0.0)).collect();
        let e: Vec<C64> = coef.eta().iter().map(|&x| C64::new(x, 0.0)).collect();
        Ok(FarField { data: self.apply_complex(&g, &e)? })
    }

    /// Direct adjoint quadrature at the sample points: returns
    /// `(gamma part, eta part)`, each of length `n_points`.
    pub fn adjoint_points(&self, lam: ArrayView2<'_, C64>) -> Result<(Vec<C64>, Vec<C64>)> {
        let n = self.cfg.n_theta;
        check_shape("far field", lam.dim(), (2 * n, n))?;
        let mut g = vec![C64::new(0.0, 0.0); self.n_points];
        let mut h = vec![C64::new(0.0, 0.0); self.n_points];
        for (k, om) in self.cfg.omegas().into_iter().enumerate() {
            let e = &self.phases[k];
            let blk = lam.slice(s![k * n..(k + 1) * n, ..]);
            let weighted = &blk * &self.dir_dot;
            let b_eta = blk.dot(e);
            let b_gamma = weighted.dot(e);
            let pre = kappa_bar(om) * self.angular_weight();
            for p in 0..self.n_points {
                let (mut sg, mut se) = (C64::new(0.0, 0.0), C64::new(0.0, 0.0));
                for i in 0..n {
                    let c = e[(i, p)].conj();
                    sg += c * b_gamma[(i, p)];
                    se += c * b_eta[(i, p)];
                }
                g[p] -= pre * sg;
                h[p] += pre * se;
            }
        }
        Ok((g, h))
    }

    /// Direct adjoint on the pixel grid, complex `2 n_c x n_c`.
    pub fn adjoint_direct(&self, lam: &FarField) -> Result<Array2<C64>> {
        let n = self.cfg.n_c;
        if n * n != self.n_points {
            return arg("operator was built on a non-pixel point set");
        }
        let (g, h) = self.adjoint_points(lam.data.view())?;
        let mut out = Array2::zeros((2 * n, n));
        for p in 0..n * n {
            out[(p / n, p % n)] = g[p];
            out[(n + p / n, p % n)] = h[p];
        }
        Ok(out)
    }
}

/// Gaussian-bump generator settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianMixtureSpec {
    /// Peaks per field.
    pub j: usize,
    /// Draw widths from `(1 - max(|x|,|y|)) * [0.3, 1)` instead of `[0, 1 - max)`.
    pub wide: bool,
}

impl Default for GaussianMixtureSpec {
    fn default() -> Self {
        Self { j: 5, wide: false }
    }
}

/// One Gaussian peak: amplitude, center, full width at half maximum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPeak {
    pub c: f64,
    pub x: f64,
    pub y: f64,
    pub width: f64,
}

impl GaussianPeak {
    pub fn sigma(&self) -> f64 {
        self.width / (8.0 * 2f64.ln()).sqrt()
    }

    pub fn value(&self, x: f64, y: f64) -> f64 {
        let s = self.sigma();
        if s <= 0.0 {
            return 0.0;
        }
        let d2 = (x - self.x).powi(2) + (y - self.y).powi(2);
        self.c * (-d2 / (2.0 * s * s)).exp()
    }
}

pub fn draw_gaussian_peaks(spec: &GaussianMixtureSpec, rng: &mut impl Rng) -> Vec<GaussianPeak> {
    let jf = spec.j as f64;
    (0..spec.j)
        .map(|_| {
            let c = rng.random::<f64>() / jf;
            let r = 0.5 * rng.random::<f64>();
            let th = 2.0 * PI * rng.random::<f64>();
            let (x, y) = (r * th.cos(), r * th.sin());
            let room = 1.0 - x.abs().max(y.abs());
            let u = rng.random::<f64>();
            let width = if spec.wide { room * (0.3 + 0.7 * u) } else { room * u };
            GaussianPeak { c, x, y, width }
        })
        .collect()
}

/// Evaluate a field on the pixel grid, masked to the unit disc.
pub fn masked_field(n_c: usize, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
    let grid = CartesianGrid::new(n_c);
    Array2::from_shape_fn((n_c, n_c), |(i, j)| {
        if grid.in_disc(i, j) {
            let [x, y] = grid.point(i, j);
            f(x, y)
        } else {
            0.0
        }
    })
}

fn stack(gamma: Array2<f64>, eta: Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(0), &[gamma.view(), eta.view()]).expect("equal shapes")
}

/// Masked sum of Gaussian bumps for both fields of sample `index`.
pub fn gen_gaussian(spec: &GaussianMixtureSpec, n_c: usize, seed: u64, index: u64) -> CoefPair {
    let fields = [field::GAMMA, field::ETA].map(|f| {
        let peaks = draw_gaussian_peaks(spec, &mut stream(seed, index, f));
        masked_field(n_c, |x, y| peaks.iter().map(|p| p.value(x, y)).sum())
    });
    let [g, e] = fields;
    CoefPair { data: stack(g, e) }
}

/// Weighted absolute-cosine mixture settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrigMixtureSpec {
    pub j: usize,
}

impl Default for TrigMixtureSpec {
    fn default() -> Self {
        Self { j: 20 }
    }
}

/// Amplitudes `c[i][j]` and phase shifts of one trigonometric field.
#[derive(Debug, Clone, PartialEq)]
pub struct TrigModes {
    pub amp: Array2<f64>,
    pub x_shift: Vec<f64>,
    pub y_shift: Vec<f64>,
}

impl TrigModes {
    pub fn value(&self, x: f64, y: f64) -> f64 {
        let j = self.x_shift.len();
        let mut acc = 0.0;
        for a in 1..=j {
            let cx = (a as f64 * (x + self.x_shift[a - 1]) * PI).cos();
            for b in 1..=j {
                let cy = (b as f64 * (y + self.y_shift[b - 1]) * PI).cos();
                let w = 1.0 / ((a * a * a + b * b * b) as f64);
                acc += self.amp[(a - 1, b - 1)] * w * (cx * cy).abs();
            }
        }
        acc
    }
}

pub fn draw_trig_modes(spec: &TrigMixtureSpec, rng: &mut impl Rng) -> TrigModes {
    let j = spec.j;
    let amp = Array2::from_shape_simple_fn((j, j), || rng.sample::<f64, _>(StandardNormal));
    let x_shift = (0..j).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y_shift = (0..j).map(|_| rng.random_range(-1.0..1.0)).collect();
    TrigModes { amp, x_shift, y_shift }
}

/// Masked absolute-cosine mixture for both fields of sample `index`.
pub fn gen_trig(spec: &TrigMixtureSpec, n_c: usize, seed: u64, index: u64) -> CoefPair {
    let [g, e] = [field::GAMMA, field::ETA].map(|f| {
        let modes = draw_trig_modes(spec, &mut stream(seed, index, f));
        masked_field(n_c, |x, y| modes.value(x, y))
    });
    CoefPair { data: stack(g, e) }
}

/// `lam + level * |lam|_F / sqrt(2 n_theta^2) * Z` with standard complex
/// Gaussian `Z` (unit mean-square modulus per entry).
pub fn add_noise(lam: &FarField, level: f64, seed: u64, index: u64) -> Result<FarField> {
    if !(level >= 0.0) || !level.is_finite() {
        return arg(format!("noise level must be nonnegative, got {level}"));
    }
    if level == 0.0 {
        return Ok(lam.clone());
    }
    let scale = level * frob_c(lam.data.view()) / (lam.data.len() as f64).sqrt();
    let mut rng = stream(seed, index, field::NOISE);
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let data = lam.data.mapv(|z| {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        z + C64::new(a, b) * (h * scale)
    });
    Ok(FarField { data })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Gaussian,
    Trig,
    /// Alternates Gaussian and trigonometric samples, starting with Gaussian.
    Mixed,
}

impl DatasetKind {
    pub fn sample_kind(self, index: usize) -> DatasetKind {
        match self {
            DatasetKind::Mixed if index % 2 == 0 => DatasetKind::Gaussian,
            DatasetKind::Mixed => DatasetKind::Trig,
            k => k,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Gaussian => "gaussian",
            DatasetKind::Trig => "trig",
            DatasetKind::Mixed => "mixed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gaussian" => Some(Self::Gaussian),
            "trig" => Some(Self::Trig),
            "mixed" => Some(Self::Mixed),
            _ => None,
        }
    }
}

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub gaussian: GaussianMixtureSpec,
    pub trig: TrigMixtureSpec,
    /// Synthesize the far field on a twice finer pixel grid.
    pub fine_grid: bool,
    pub noise: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Gaussian,
            gaussian: GaussianMixtureSpec::default(),
            trig: TrigMixtureSpec::default(),
            fine_grid: false,
            noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSample {
    pub input: FarField,
    pub target: CoefPair,
    pub kind: DatasetKind,
    pub seed: u64,
    pub index: u64,
}

fn coef_for(spec: &DatasetSpec, kind: DatasetKind, n_c: usize, seed: u64, index: u64) -> CoefPair {
    match kind {
        DatasetKind::Trig => gen_trig(&spec.trig, n_c, seed, index),
        _ => gen_gaussian(&spec.gaussian, n_c, seed, index),
    }
}

/// `count` samples with per-sample streams `(seed, index)`.
pub fn gen_dataset(cfg: &ProblemConfig, spec: &DatasetSpec, count: usize, seed: u64) -> Result<Vec<DatasetSample>> {
    if count == 0 {
        return arg("dataset needs at least one sample");
    }
    let coarse = BornOperator::new(cfg);
    let fine = if spec.fine_grid {
        let fcfg = ProblemConfig::new(cfg.omega1, cfg.omega2, cfg.n_theta, 2 * cfg.n_c, cfg.alpha)?;
        Some((fcfg, BornOperator::new(&fcfg)))
    } else {
        None
    };
    (0..count)
        .into_par_iter()
        .map(|k| {
            let index = k as u64;
            let kind = spec.kind.sample_kind(k);
            let target = coef_for(spec, kind, cfg.n_c, seed, index);
            let clean = match &fine {
                Some((fcfg, op)) => op.far_field(&coef_for(spec, kind, fcfg.n_c, seed, index))?,
                None => coarse.far_field(&target)?,
            };
            let input = add_noise(&clean, spec.noise, seed, index)?;
            Ok(DatasetSample { input, target, kind, seed, index })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kappa_modulus() {
        for om in [2.5f64, 5.0, 10.0] {
            let want = om.powf(1.5) / (8.0 * PI).sqrt();
            assert!((kappa(om).norm() - want).abs() < 1e-14 * want);
            assert_eq!(kappa_bar(om), kappa(om).conj());
        }
    }

    #[test]
    fn zero_coefficients_give_zero_data() {
        let cfg = ProblemConfig::square(8, 1.0).unwrap();
        let op = BornOperator::new(&cfg);
        let lam = op.far_field(&CoefPair::zeros(&cfg)).unwrap();
        assert!(lam.data.iter().all(|z| *z == C64::new(0.0, 0.0)));
        let back = op.adjoint_direct(&FarField::zeros(&cfg)).unwrap();
        assert!(back.iter().all(|z| *z == C64::new(0.0, 0.0)));
    }

    #[test]
    fn constant_eta_diagonal_is_disc_area() {
        let cfg = ProblemConfig::square(16, 1.0).unwrap();
        let op = BornOperator::new(&cfg);
        let eta = masked_field(16, |_, _| 1.0);
        let inside = eta.iter().filter(|&&v| v == 1.0).count() as f64;
        let coef = CoefPair::new(stack(Array2::zeros((16, 16)), eta), &cfg).unwrap();
        let lam = op.far_field(&coef).unwrap();
        for k in 0..2 {
            let want = kappa(cfg.omegas()[k]) * inside * (2.0 / 16.0f64).powi(2);
            for i in 0..16 {
                assert!((lam.block(k)[(i, i)] - want).norm() < 1e-12 * want.norm());
            }
        }
    }

    #[test]
    fn gaussian_half_width() {
        let p = GaussianPeak { c: 0.2, x: 0.0, y: 0.0, width: 0.5 };
        assert!((p.value(0.0, 0.0) - 0.2).abs() < 1e-15);
        assert!((p.value(0.25, 0.0) - 0.1).abs() < 1e-14);
        let z = GaussianPeak { c: 0.2, x: 0.0, y: 0.0, width: 0.0 };
        assert_eq!(z.value(0.0, 0.0), 0.0);
    }

    #[test]
    fn trig_single_mode_value() {
        let m = TrigModes { amp: Array2::from_elem((1, 1), 2.0), x_shift: vec![0.0], y_shift: vec![0.0] };
        assert!((m.value(0.0, 0.0) - 1.0).abs() < 1e-15);
        assert!((m.value(0.25, 0.0) - (PI / 4.0).cos()).abs() < 1e-15);
    }

    #[test]
    fn mixed_alternates() {
        let cfg = ProblemConfig::square(8, 1.0).unwrap();
        let spec = DatasetSpec { kind: DatasetKind::Mixed, ..Default::default() };
        let ds = gen_dataset(&cfg, &spec, 4, 3).unwrap();
        let kinds: Vec<_> = ds.iter().map(|s| s.kind).collect();
        assert_eq!(kinds, vec![DatasetKind::Gaussian, DatasetKind::Trig, DatasetKind::Gaussian, DatasetKind::Trig]);
        assert!(ds.iter().all(|s| s.target.is_disc_supported()));
        assert!(gen_dataset(&cfg, &spec, 0, 3).is_err());
    }

    #[test]
    fn noise_rejects_negative_and_is_identity_at_zero() {
        let cfg = ProblemConfig::square(8, 1.0).unwrap();
        let lam = gen_dataset(&cfg, &DatasetSpec::default(), 1, 1).unwrap().remove(0).input;
        assert!(add_noise(&lam, -0.1, 0, 0).is_err());
        assert_eq!(add_noise(&lam, 0.0, 0, 0).unwrap(), lam);
        assert_eq!(add_noise(&lam, 0.1, 5, 0).unwrap(), add_noise(&lam, 0.1, 5, 0).unwrap());
    }
}
