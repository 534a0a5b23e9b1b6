//! Convolution form of the regularized normal operator: angular quadrature of
//! the filters, the transform-domain symbol and its exact inverse on a padded
//! torus, and the two residual convolution layers that approximate the
//! inverse on `[-1, 1]^2`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::{s, Array2, ArrayView2};
use num_complex::Complex64 as C64;

use crate::adjoint::{phi0_apply, Phi0Output};
use crate::error::{arg, check_shape, Error, Result};
use crate::forward::{kappa, BornOperator, FarField};
use crate::grid::{PolarResampler, ProblemConfig};
use crate::linalg::Fft2;

/// Default angular node count for filter quadrature.
pub const DEFAULT_NQ: usize = 512;

/// Default torus side, in multiples of `n_c`.
pub const DEFAULT_PAD: usize = 4;

/// Exponent of `xhat . zeta` in filter `(j, j')`, and its sign.
fn filter_power(j: usize, jp: usize) -> (usize, f64) {
    let p = 4 - j - jp;
    let sign = if (j + jp) % 2 == 0 { 1.0 } else { -1.0 };
    (p, sign)
}

/// Angular double sums `sum_{a,b} (xhat_a . zeta_b)^p cos(omega (xhat_a - zeta_b) . y)`
/// for `p = 0, 1, 2`, scaled by the trapezoid weight. The double sum factors
/// exactly into squared moduli of single sums.
fn angular_sums(omega: f64, y: [f64; 2], n_q: usize) -> [f64; 3] {
    let d = 2.0 * PI / n_q as f64;
    let zero = C64::new(0.0, 0.0);
    let (mut s0, mut sc, mut ss, mut scc, mut scs, mut sss) = (zero, zero, zero, zero, zero, zero);
    for a in 1..=n_q {
        let t = d * a as f64;
        let (c, sn) = (t.cos(), t.sin());
        let e = C64::from_polar(1.0, omega * (c * y[0] + sn * y[1]));
        s0 += e;
        sc += e * c;
        ss += e * sn;
        scc += e * (c * c);
        scs += e * (c * sn);
        sss += e * (sn * sn);
    }
    let w = d * d;
    [
        s0.norm_sqr() * w,
        (sc.norm_sqr() + ss.norm_sqr()) * w,
        (scc.norm_sqr() + 2.0 * scs.norm_sqr() + sss.norm_sqr()) * w,
    ]
}

/// Trapezoid quadrature of `g_{j j'}^omega(y)` with `n_q` nodes per angle and
/// `|kappa|^2` as prefactor. `j, j'` are 1 or 2.
pub fn filter_value(j: usize, jp: usize, omega: f64, y: [f64; 2], n_q: usize) -> Result<f64> {
    if !(1..=2).contains(&j) || !(1..=2).contains(&jp) {
        return arg(format!("filter index ({j}, {jp}) outside {{1, 2}}"));
    }
    let (p, sign) = filter_power(j, jp);
    Ok(sign * kappa(omega).norm_sqr() * angular_sums(omega, y, n_q)[p])
}

/// Filters sampled at lags `(a - n_c, b - n_c) * (2/n_c)`, i.e. the uniform
/// `2 n_c x 2 n_c` grid on `[-2, 2)^2` with the origin at index `(n_c, n_c)`.
#[derive(Debug)]
pub struct FilterBank {
    pub n_c: usize,
    pub n_q: usize,
    pub omegas: [f64; 2],
    /// `[frequency][kind]`, kind 0 = `g11`, 1 = `g12` (= `g21`), 2 = `g22`.
    filters: [[Array2<f64>; 3]; 2],
}

fn kind_index(j: usize, jp: usize) -> usize {
    match (j, jp) {
        (1, 1) => 0,
        (2, 2) => 2,
        _ => 1,
    }
}

type BankKey = (u64, usize, usize);

fn bank_cache() -> &'static Mutex<HashMap<BankKey, Arc<[[Array2<f64>; 3]; 1]>>> {
    static CACHE: OnceLock<Mutex<HashMap<BankKey, Arc<[[Array2<f64>; 3]; 1]>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn sample_filters(omega: f64, n_c: usize, n_q: usize) -> Arc<[[Array2<f64>; 3]; 1]> {
    let key = (omega.to_bits(), n_c, n_q);
    if let Some(hit) = bank_cache().lock().expect("cache lock").get(&key) {
        return hit.clone();
    }
    let h = 2.0 / n_c as f64;
    let k2 = kappa(omega).norm_sqr();
    // Radially symmetric: evaluate once per distinct squared lag.
    let mut radial: HashMap<usize, [f64; 3]> = HashMap::new();
    for a in 0..=n_c {
        for b in 0..=a {
            let key = a * a + b * b;
            radial.entry(key).or_insert_with(|| angular_sums(omega, [h * (key as f64).sqrt(), 0.0], n_q));
        }
    }
    let m = 2 * n_c;
    let mk = |kind: usize| {
        let (j, jp) = [(1, 1), (1, 2), (2, 2)][kind];
        let (p, sign) = filter_power(j, jp);
        Array2::from_shape_fn((m, m), |(a, b)| {
            let (da, db) = (a.abs_diff(n_c), b.abs_diff(n_c));
            sign * k2 * radial[&(da * da + db * db)][p]
        })
    };
    let out = Arc::new([[mk(0), mk(1), mk(2)]]);
    bank_cache().lock().expect("cache lock").insert(key, out.clone());
    out
}

impl FilterBank {
    pub fn new(cfg: &ProblemConfig, n_q: usize) -> Result<Self> {
        if n_q < 4 * cfg.omega2.ceil() as usize {
            return arg(format!("n_q = {n_q} under-resolves omega2 = {}", cfg.omega2));
        }
        let f = cfg.omegas().map(|om| {
            let a = sample_filters(om, cfg.n_c, n_q);
            a[0].clone()
        });
        Ok(Self { n_c: cfg.n_c, n_q, omegas: cfg.omegas(), filters: f })
    }

    /// Filter `G_{j j'}` at frequency index `w`; `(1, 2)` and `(2, 1)` return
    /// the same array.
    pub fn get(&self, j: usize, jp: usize, w: usize) -> &Array2<f64> {
        &self.filters[w][kind_index(j, jp)]
    }

    /// All-zero bank of the same shape (for structural tests).
    pub fn zeroed(&self) -> Self {
        let z = || Array2::zeros((2 * self.n_c, 2 * self.n_c));
        Self { n_c: self.n_c, n_q: self.n_q, omegas: self.omegas, filters: [[z(), z(), z()], [z(), z(), z()]] }
    }
}

/// Linear convolution of `n_c x n_c` fields with lag kernels, realized on a
/// padded FFT grid. Output is restricted to the input grid.
#[derive(Debug, Clone)]
pub struct ConvPlan {
    pub n_c: usize,
    fft: Fft2,
}

impl ConvPlan {
    pub fn new(n_c: usize) -> Self {
        Self { n_c, fft: Fft2::new(2 * n_c) }
    }

    /// Spectrum of a `2 n_c x 2 n_c` lag kernel (origin at `(n_c, n_c)`);
    /// the unused lag `-n_c` row and column are dropped.
    pub fn kernel_spectrum(&self, g: ArrayView2<'_, f64>) -> Array2<C64> {
        let n = self.n_c;
        let l = 2 * n;
        let mut buf = Array2::zeros((l, l));
        for a in 1..l {
            for b in 1..l {
                let (la, lb) = (a as isize - n as isize, b as isize - n as isize);
                let (ia, ib) = (la.rem_euclid(l as isize) as usize, lb.rem_euclid(l as isize) as usize);
                buf[(ia, ib)] = C64::new(g[(a, b)], 0.0);
            }
        }
        self.fft.forward(&mut buf);
        buf
    }

    pub fn field_spectrum(&self, f: ArrayView2<'_, f64>) -> Array2<C64> {
        let l = 2 * self.n_c;
        let mut buf = Array2::zeros((l, l));
        buf.slice_mut(s![..self.n_c, ..self.n_c]).assign(&f.mapv(|x| C64::new(x, 0.0)));
        self.fft.forward(&mut buf);
        buf
    }

    /// Restricted inverse transform of a product spectrum.
    pub fn finish(&self, mut spec: Array2<C64>) -> Array2<f64> {
        self.fft.inverse(&mut spec);
        spec.slice(s![..self.n_c, ..self.n_c]).mapv(|z| z.re)
    }
}

/// `sum_q g[p - q] f[q]` by direct summation at one output pixel (oracle).
pub fn direct_conv_at(g: ArrayView2<'_, f64>, f: ArrayView2<'_, f64>, p: (usize, usize)) -> f64 {
    let n = f.nrows();
    let mut acc = 0.0;
    for q0 in 0..n {
        for q1 in 0..n {
            acc += g[(p.0 + n - q0, p.1 + n - q1)] * f[(q0, q1)];
        }
    }
    acc
}

fn split(f: ArrayView2<'_, f64>) -> (ArrayView2<'_, f64>, ArrayView2<'_, f64>) {
    let n = f.ncols();
    (f.slice_move(s![..n, ..]), f.slice_move(s![n.., ..]))
}

fn stack(top: Array2<f64>, bot: Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(ndarray::Axis(0), &[top.view(), bot.view()]).expect("equal shapes")
}

/// Symmetric two-channel convolution layer with a scaled identity:
/// `out_a = sum_b k_ab * f_b + residual f_a`, with `k_01 = k_10`. Kernel
/// spectra are computed once and already carry the cell area.
#[derive(Debug, Clone)]
pub struct BlockConv {
    pub n_c: usize,
    pub residual: f64,
    plan: ConvPlan,
    /// Spectra of `k_00`, `k_01`, `k_11`.
    spec: [Array2<C64>; 3],
}

impl BlockConv {
    /// Layer whose kernels are `sum_w sum_t c_t G_t^w` for the three filter
    /// kinds `t = (11, 12, 22)`, with one coefficient triple per kernel slot.
    pub fn from_bank(bank: &FilterBank, coeffs: [[f64; 3]; 3], residual: f64) -> Self {
        let n = bank.n_c;
        let plan = ConvPlan::new(n);
        let area = (2.0 / n as f64).powi(2);
        let kinds = [(1, 1), (1, 2), (2, 2)];
        let spec = coeffs.map(|c| {
            let mut k = Array2::<f64>::zeros((2 * n, 2 * n));
            for w in 0..2 {
                for (t, &(j, jp)) in kinds.iter().enumerate() {
                    if c[t] != 0.0 {
                        k.scaled_add(c[t] * area, bank.get(j, jp, w));
                    }
                }
            }
            plan.kernel_spectrum(k.view())
        });
        Self { n_c: n, residual, plan, spec }
    }

    pub fn apply(&self, f: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let n = self.n_c;
        check_shape("coefficient field", f.dim(), (2 * n, n))?;
        let (f1, f2) = split(f);
        let s1 = self.plan.field_spectrum(f1);
        let s2 = self.plan.field_spectrum(f2);
        let mut top = self.plan.finish(&self.spec[0] * &s1 + &self.spec[1] * &s2);
        let mut bot = self.plan.finish(&self.spec[1] * &s1 + &self.spec[2] * &s2);
        top.scaled_add(self.residual, &f1);
        bot.scaled_add(self.residual, &f2);
        Ok(stack(top, bot))
    }
}

/// `(F*F + alpha I)` as a block convolution on `[-1, 1]^2`.
pub fn normal_operator(bank: &FilterBank, alpha: f64) -> BlockConv {
    BlockConv::from_bank(bank, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], alpha)
}

/// First residual layer: the adjugate pattern `[[G22, -G12], [-G12, G11]]`
/// plus `alpha O`.
pub fn psi1_operator(bank: &FilterBank, alpha: f64) -> BlockConv {
    BlockConv::from_bank(bank, [[0.0, 0.0, 1.0], [0.0, -1.0, 0.0], [1.0, 0.0, 0.0]], alpha)
}

/// `(F*F + alpha I) f` as the 2x2 block linear convolution with the sampled
/// filters on `[-1, 1]^2`.
pub fn apply_normal_op(f: ArrayView2<'_, f64>, bank: &FilterBank, alpha: f64) -> Result<Array2<f64>> {
    normal_operator(bank, alpha).apply(f)
}

/// First residual layer applied once.
pub fn psi1_apply(o: ArrayView2<'_, f64>, bank: &FilterBank, alpha: f64) -> Result<Array2<f64>> {
    psi1_operator(bank, alpha).apply(o)
}

/// Inverse of the normal operator on fields supported in a pixel mask, by
/// conjugate gradients on `M (F*F + alpha I) M` with `M` the 0/1 mask. The
/// default mask is the unit disc, the support of the coefficients. The
/// restricted operator is symmetric positive definite with spectrum in
/// `[alpha, alpha + |G|]`.
#[derive(Debug, Clone)]
pub struct DomainSolver {
    pub op: BlockConv,
    mask: Array2<f64>,
    pub rel_tol: f64,
    pub max_iter: usize,
}

/// 0/1 mask of the pixels whose centers lie in the closed unit disc, stacked
/// for both channels.
pub fn disc_mask(n_c: usize) -> Array2<f64> {
    let grid = crate::grid::CartesianGrid::new(n_c);
    Array2::from_shape_fn((2 * n_c, n_c), |(i, j)| if grid.in_disc(i % n_c, j) { 1.0 } else { 0.0 })
}

impl DomainSolver {
    /// Solver on the unit-disc pixels.
    pub fn new(bank: &FilterBank, alpha: f64) -> Result<Self> {
        Self::with_mask(bank, alpha, disc_mask(bank.n_c))
    }

    /// Solver on the pixels where `mask` is nonzero.
    pub fn with_mask(bank: &FilterBank, alpha: f64, mask: Array2<f64>) -> Result<Self> {
        if !(alpha > 0.0) {
            return arg(format!("alpha must be positive, got {alpha}"));
        }
        let n = bank.n_c;
        check_shape("mask", mask.dim(), (2 * n, n))?;
        let mask = mask.mapv(|m| if m != 0.0 { 1.0 } else { 0.0 });
        Ok(Self { op: normal_operator(bank, alpha), mask, rel_tol: 1e-12, max_iter: 20_000 })
    }

    /// Restricted normal operator `M (F*F + alpha I) M f`.
    pub fn apply(&self, f: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.op.apply((&f * &self.mask).view())? * &self.mask)
    }

    pub fn solve(&self, h: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let n = self.op.n_c;
        check_shape("right-hand side", h.dim(), (2 * n, n))?;
        let dot = |a: &Array2<f64>, b: &Array2<f64>| (a * b).sum();
        let mut x = Array2::<f64>::zeros(h.dim());
        let mut r = &h * &self.mask;
        let hh = dot(&r, &r);
        let stop = self.rel_tol * self.rel_tol * hh;
        let mut p = r.clone();
        let mut rr = hh;
        for _ in 0..self.max_iter {
            if rr <= stop {
                return Ok(x);
            }
            let ap = self.apply(p.view())?;
            let step = rr / dot(&p, &ap);
            x.scaled_add(step, &p);
            r.scaled_add(-step, &ap);
            let next = dot(&r, &r);
            p = &r + &(p * (next / rr));
            rr = next;
        }
        if rr <= stop {
            Ok(x)
        } else {
            Err(Error::Numerical(format!("conjugate gradients stalled at relative residual {:.3e}", (rr / hh).sqrt())))
        }
    }
}

/// Second residual layer: `alpha^-2 O - G_{2,alpha} * O` per channel.
pub fn psi2_apply(o: ArrayView2<'_, f64>, g2a: ArrayView2<'_, f64>, alpha: f64) -> Result<Array2<f64>> {
    if !(alpha > 0.0) {
        return arg(format!("alpha must be positive, got {alpha}"));
    }
    let n = o.ncols();
    check_shape("coefficient field", o.dim(), (2 * n, n))?;
    check_shape("g2 kernel", g2a.dim(), (2 * n, 2 * n))?;
    let plan = ConvPlan::new(n);
    let gs = plan.kernel_spectrum(g2a);
    let area = (2.0 / n as f64).powi(2);
    let (o1, o2) = split(o);
    let mut chans = [o1, o2].map(|x| {
        let mut out = plan.finish(&gs * &plan.field_spectrum(x));
        out.zip_mut_with(&x, |v, &xi| *v = xi / (alpha * alpha) - area * *v);
        out
    });
    let bot = std::mem::take(&mut chans[1]);
    let top = std::mem::take(&mut chans[0]);
    Ok(stack(top, bot))
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

/// Angular measure of `{theta : r (cos theta, sin theta) in cell}`.
fn arc_measure(r: f64, x0: f64, x1: f64, y0: f64, y1: f64) -> f64 {
    let inside = |t: f64| {
        let (x, y) = (r * t.cos(), r * t.sin());
        x >= x0 && x <= x1 && y >= y0 && y <= y1
    };
    let mut cuts = Vec::with_capacity(8);
    for xv in [x0, x1] {
        if xv.abs() <= r {
            let a = (xv / r).acos();
            cuts.push(a);
            cuts.push(-a);
        }
    }
    for yv in [y0, y1] {
        if yv.abs() <= r {
            let a = (yv / r).asin();
            cuts.push(a);
            cuts.push(PI - a);
        }
    }
    if cuts.is_empty() {
        return if inside(0.0) { 2.0 * PI } else { 0.0 };
    }
    let mut cuts: Vec<f64> = cuts.into_iter().map(|t| t.rem_euclid(2.0 * PI)).collect();
    cuts.sort_by(f64::total_cmp);
    let mut total = 0.0;
    for k in 0..cuts.len() {
        let a = cuts[k];
        let b = if k + 1 < cuts.len() { cuts[k + 1] } else { cuts[0] + 2.0 * PI };
        if b - a > 0.0 && inside(0.5 * (a + b)) {
            total += b - a;
        }
    }
    total
}

/// Radial profiles of the per-frequency symbol multiplied by `r`:
/// `|kappa|^2 16 pi^2 / (omega sqrt(4 - (r/omega)^2)) * c^p`, `c = 1 - r^2/(2 omega^2)`.
fn profile_times_r(r: f64, omega: f64) -> [f64; 3] {
    let s = r / omega;
    let base = kappa(omega).norm_sqr() * 16.0 * PI * PI / (omega * (4.0 - s * s).max(0.0).sqrt());
    let c = 1.0 - 0.5 * s * s;
    [base, base * c, base * c * c]
}

/// Exact cell averages of the three profiles over `[x0,x1] x [y0,y1]`.
fn cell_average(omega: f64, x0: f64, x1: f64, y0: f64, y1: f64, gl: &(Vec<f64>, Vec<f64>)) -> [f64; 3] {
    let gap = |lo: f64, hi: f64| if lo <= 0.0 && hi >= 0.0 { 0.0 } else { lo.abs().min(hi.abs()) };
    let rmin = gap(x0, x1).hypot(gap(y0, y1));
    let rmax = x0.abs().max(x1.abs()).hypot(y0.abs().max(y1.abs()));
    let edge = 2.0 * omega;
    if rmin >= edge {
        return [0.0; 3];
    }
    let hi = rmax.min(edge);
    let mut brk = vec![rmin, hi];
    for v in [x0.abs(), x1.abs(), y0.abs(), y1.abs()] {
        brk.push(v);
    }
    for x in [x0, x1] {
        for y in [y0, y1] {
            brk.push(x.hypot(y));
        }
    }
    brk.retain(|&b| b >= rmin && b <= hi);
    brk.sort_by(f64::total_cmp);
    brk.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * hi.max(1.0));
    let mut acc = [0.0; 3];
    for seg in brk.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        if b <= a {
            continue;
        }
        // r = a + (b - a)(1 - cos(pi u))/2 clusters nodes at both ends.
        for (&xn, &wn) in gl.0.iter().zip(&gl.1) {
            let u = 0.5 * (xn + 1.0);
            let r = a + (b - a) * 0.5 * (1.0 - (PI * u).cos());
            let jac = (b - a) * 0.5 * PI * (PI * u).sin() * 0.5 * wn;
            let phi = arc_measure(r, x0, x1, y0, y1);
            if phi == 0.0 || r >= edge {
                continue;
            }
            let prof = profile_times_r(r, omega);
            for p in 0..3 {
                acc[p] += prof[p] * phi * jac;
            }
        }
    }
    let area = (x1 - x0) * (y1 - y0);
    acc.map(|v| v / area)
}

/// Signed DFT frequency index.
fn freq_index(k: usize, l: usize) -> isize {
    if k < l / 2 {
        k as isize
    } else {
        k as isize - l as isize
    }
}

/// Cell-averaged transform-domain symbol of `F*F` on an `l x l` torus with
/// spacing `h`. Per frequency cell it holds the averaged profiles
/// `[eta-eta, cross, gamma-gamma]` of each frequency; the 2x2 symbol is
/// `[[sum P2 + alpha, -sum P1], [-sum P1, sum P0 + alpha]]`.
#[derive(Debug, Clone)]
pub struct SymbolField {
    pub l: usize,
    pub h: f64,
    pub omegas: [f64; 2],
    /// `[frequency][profile]`, indexed by DFT bins.
    prof: [[Array2<f64>; 3]; 2],
}

impl SymbolField {
    pub fn new(omegas: [f64; 2], l: usize, h: f64) -> Self {
        let cell = 2.0 * PI / (l as f64 * h);
        let gl = gauss_legendre(48);
        let prof = omegas.map(|om| {
            let mut p = [Array2::zeros((l, l)), Array2::zeros((l, l)), Array2::zeros((l, l))];
            let kmax = ((2.0 * om / cell).ceil() as isize + 1).min(l as isize / 2);
            for kx in -kmax..=kmax {
                for ky in -kmax..=kmax {
                    let (cx, cy) = (kx as f64 * cell, ky as f64 * cell);
                    let v = cell_average(om, cx - cell / 2.0, cx + cell / 2.0, cy - cell / 2.0, cy + cell / 2.0, &gl);
                    let (ia, ib) = (kx.rem_euclid(l as isize) as usize, ky.rem_euclid(l as isize) as usize);
                    for q in 0..3 {
                        p[q][(ia, ib)] = v[q];
                    }
                }
            }
            p
        });
        Self { l, h, omegas, prof }
    }

    /// Torus of side `pad * n_c` at the pixel spacing of `cfg`.
    pub fn for_config(cfg: &ProblemConfig, pad: usize) -> Self {
        Self::new(cfg.omegas(), pad * cfg.n_c, 2.0 / cfg.n_c as f64)
    }

    /// Frequency-cell width.
    pub fn cell(&self) -> f64 {
        2.0 * PI / (self.l as f64 * self.h)
    }

    /// `|xi|` of DFT bin `(a, b)`.
    pub fn radius(&self, a: usize, b: usize) -> f64 {
        let c = self.cell();
        (freq_index(a, self.l) as f64 * c).hypot(freq_index(b, self.l) as f64 * c)
    }

    /// `(s11, s12, s22)` at bin `(a, b)`.
    pub fn entries(&self, a: usize, b: usize, alpha: f64) -> (f64, f64, f64) {
        let mut s = (alpha, 0.0, alpha);
        for w in 0..2 {
            s.0 += self.prof[w][2][(a, b)];
            s.1 -= self.prof[w][1][(a, b)];
            s.2 += self.prof[w][0][(a, b)];
        }
        s
    }

    pub fn det_field(&self, alpha: f64) -> Array2<f64> {
        Array2::from_shape_fn((self.l, self.l), |(a, b)| {
            let (s11, s12, s22) = self.entries(a, b, alpha);
            s11 * s22 - s12 * s12
        })
    }

    /// Symbol of `g_{2,alpha}`: `alpha^-2 - 1/det`.
    pub fn g2_alpha_symbol(&self, alpha: f64) -> Array2<f64> {
        self.det_field(alpha).mapv(|d| 1.0 / (alpha * alpha) - 1.0 / d)
    }

    /// Kernel samples on the lag grid `[-n_c, n_c)^2 * h` of a symbol.
    fn lag_kernel(&self, sym: &Array2<f64>, n_c: usize) -> Array2<f64> {
        let fft = Fft2::new(self.l);
        let mut buf = sym.mapv(|v| C64::new(v, 0.0));
        fft.inverse(&mut buf);
        let inv_area = 1.0 / (self.h * self.h);
        let l = self.l as isize;
        Array2::from_shape_fn((2 * n_c, 2 * n_c), |(a, b)| {
            let la = (a as isize - n_c as isize).rem_euclid(l) as usize;
            let lb = (b as isize - n_c as isize).rem_euclid(l) as usize;
            buf[(la, lb)].re * inv_area
        })
    }

    /// `G_{2,alpha}`: the band-limited kernel restricted to `[-2, 2)^2`.
    pub fn g2_alpha_kernel(&self, alpha: f64, n_c: usize) -> Array2<f64> {
        self.lag_kernel(&self.g2_alpha_symbol(alpha), n_c)
    }

    /// Periodized kernel of filter `(j, j')` summed over both frequencies.
    pub fn filter_kernel(&self, j: usize, jp: usize, n_c: usize) -> Array2<f64> {
        let (p, sign) = filter_power(j, jp);
        let sym = Array2::from_shape_fn((self.l, self.l), |(a, b)| {
            sign * (self.prof[0][p][(a, b)] + self.prof[1][p][(a, b)])
        });
        self.lag_kernel(&sym, n_c)
    }
}

/// Padded-torus normal operator and its exact inverse, sharing one symbol.
#[derive(Debug, Clone)]
pub struct TorusSolver {
    pub n_c: usize,
    pub alpha: f64,
    symbol: SymbolField,
    fft: Fft2,
}

impl TorusSolver {
    pub fn new(cfg: &ProblemConfig, pad: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return arg(format!("alpha must be positive, got {alpha}"));
        }
        if pad < 2 {
            return arg("torus must be at least twice the domain");
        }
        let symbol = SymbolField::for_config(cfg, pad);
        let fft = Fft2::new(symbol.l);
        Ok(Self { n_c: cfg.n_c, alpha, symbol, fft })
    }

    pub fn from_symbol(symbol: SymbolField, n_c: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return arg(format!("alpha must be positive, got {alpha}"));
        }
        let fft = Fft2::new(symbol.l);
        Ok(Self { n_c, alpha, symbol, fft })
    }

    pub fn symbol(&self) -> &SymbolField {
        &self.symbol
    }

    pub fn side(&self) -> usize {
        self.symbol.l
    }

    /// Embed a `2 n_c x n_c` field into two `l x l` channels at the origin corner.
    pub fn pad(&self, f: ArrayView2<'_, f64>) -> Result<[Array2<f64>; 2]> {
        let n = self.n_c;
        check_shape("coefficient field", f.dim(), (2 * n, n))?;
        let l = self.side();
        Ok([0, 1].map(|b| {
            let mut out = Array2::zeros((l, l));
            out.slice_mut(s![..n, ..n]).assign(&f.slice(s![b * n..(b + 1) * n, ..]));
            out
        }))
    }

    pub fn restrict(&self, f: &[Array2<f64>; 2]) -> Array2<f64> {
        let n = self.n_c;
        stack(f[0].slice(s![..n, ..n]).to_owned(), f[1].slice(s![..n, ..n]).to_owned())
    }

    fn transform(&self, f: &[Array2<f64>; 2], inverse: bool) -> Result<[Array2<f64>; 2]> {
        let l = self.side();
        for c in f {
            check_shape("padded channel", c.dim(), (l, l))?;
        }
        let mut a = f[0].mapv(|x| C64::new(x, 0.0));
        let mut b = f[1].mapv(|x| C64::new(x, 0.0));
        self.fft.forward(&mut a);
        self.fft.forward(&mut b);
        let floor = 0.5 * self.alpha * self.alpha;
        for i in 0..l {
            for j in 0..l {
                let (s11, s12, s22) = self.symbol.entries(i, j, self.alpha);
                let (x, y) = (a[(i, j)], b[(i, j)]);
                if inverse {
                    let det = s11 * s22 - s12 * s12;
                    if !(det >= floor) {
                        return Err(Error::Invariant(format!("symbol determinant {det} below alpha^2/2 at bin ({i}, {j})")));
                    }
                    a[(i, j)] = (x * s22 - y * s12) / det;
                    b[(i, j)] = (y * s11 - x * s12) / det;
                } else {
                    a[(i, j)] = x * s11 + y * s12;
                    b[(i, j)] = x * s12 + y * s22;
                }
            }
        }
        self.fft.inverse(&mut a);
        self.fft.inverse(&mut b);
        Ok([a.mapv(|z| z.re), b.mapv(|z| z.re)])
    }

    /// `(F*F + alpha I)` on the padded torus.
    pub fn normal_op_padded(&self, f: &[Array2<f64>; 2]) -> Result<[Array2<f64>; 2]> {
        self.transform(f, false)
    }

    /// Exact inverse of [`Self::normal_op_padded`].
    pub fn solve_padded(&self, h: &[Array2<f64>; 2]) -> Result<[Array2<f64>; 2]> {
        self.transform(h, true)
    }

    /// Tikhonov solve of a field given on `[-1, 1]^2`: zero-pad, invert on the
    /// torus, restrict.
    pub fn tikhonov_solve(&self, h: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let padded = self.pad(h)?;
        Ok(self.restrict(&self.solve_padded(&padded)?))
    }

    /// `G_{2,alpha}` for the second residual layer.
    pub fn g2_alpha_kernel(&self) -> Array2<f64> {
        self.symbol.g2_alpha_kernel(self.alpha, self.n_c)
    }
}

/// Free-function form of [`TorusSolver::tikhonov_solve`].
pub fn tikhonov_solve(h: ArrayView2<'_, f64>, solver: &TorusSolver) -> Result<Array2<f64>> {
    solver.tikhonov_solve(h)
}

/// Non-learned reconstructions from far-field data.
///
/// [`Reconstructor::reconstruct`] is the regularized pseudo-inverse
/// `(F*F + alpha I)^{-1} F* lam` on disc-supported pixel fields, with `F*`
/// the direct adjoint quadrature. [`Reconstructor::reconstruct_polar`] feeds
/// the same inverse with the resampled polar network output
/// `psi0(Re phi0(lam))`, and [`Reconstructor::reconstruct_layers`] replaces
/// the inverse by the two residual convolution layers with exact kernels.
#[derive(Debug, Clone)]
pub struct Reconstructor {
    pub cfg: ProblemConfig,
    born: BornOperator,
    k: Array2<C64>,
    c: Array2<f64>,
    resampler: PolarResampler,
    domain: DomainSolver,
    psi1: BlockConv,
    g2a: Array2<f64>,
}

impl Reconstructor {
    pub fn new(cfg: &ProblemConfig, pad: usize) -> Result<Self> {
        let bank = FilterBank::new(cfg, DEFAULT_NQ)?;
        let torus = TorusSolver::new(cfg, pad, cfg.alpha)?;
        Ok(Self {
            cfg: *cfg,
            born: BornOperator::new(cfg),
            k: crate::adjoint::kernel_matrix(cfg),
            c: crate::adjoint::cosine_matrix(cfg.n_theta),
            resampler: PolarResampler::new(cfg),
            domain: DomainSolver::new(&bank, cfg.alpha)?,
            psi1: psi1_operator(&bank, cfg.alpha),
            g2a: torus.g2_alpha_kernel(),
        })
    }

    pub fn adjoint_polar(&self, lam: &FarField) -> Result<Phi0Output> {
        phi0_apply(lam, self.k.view(), self.c.view(), &self.cfg)
    }

    /// Cartesian input to the deconvolution stage, `psi0(Re phi0(lam))`.
    pub fn adjoint_cartesian(&self, lam: &FarField) -> Result<Array2<f64>> {
        self.resampler.apply(self.adjoint_polar(lam)?.real().view())
    }

    /// `Re F* lam` at the pixel centers.
    pub fn adjoint_pixels(&self, lam: &FarField) -> Result<Array2<f64>> {
        Ok(self.born.adjoint_direct(lam)?.mapv(|z| z.re))
    }

    pub fn reconstruct(&self, lam: &FarField) -> Result<Array2<f64>> {
        self.domain.solve(self.adjoint_pixels(lam)?.view())
    }

    pub fn reconstruct_polar(&self, lam: &FarField) -> Result<Array2<f64>> {
        self.domain.solve(self.adjoint_cartesian(lam)?.view())
    }

    /// `psi2(psi1(psi0(Re phi0(lam))))` with exact kernels.
    pub fn reconstruct_layers(&self, lam: &FarField) -> Result<Array2<f64>> {
        let mid = self.psi1.apply(self.adjoint_cartesian(lam)?.view())?;
        psi2_apply(mid.view(), self.g2a.view(), self.cfg.alpha)
    }

    /// `G_{2,alpha}` on the lag grid.
    pub fn g2_alpha_kernel(&self) -> &Array2<f64> {
        &self.g2a
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(10);
        let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(18)).sum();
        assert!((q - 2.0 / 19.0).abs() < 1e-14);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn arc_measure_simple_cases() {
        assert!((arc_measure(0.5, -1.0, 1.0, -1.0, 1.0) - 2.0 * PI).abs() < 1e-14);
        assert!((arc_measure(0.5, 0.0, 1.0, 0.0, 1.0) - PI / 2.0).abs() < 1e-14);
        assert_eq!(arc_measure(3.0, -1.0, 1.0, -1.0, 1.0), 0.0);
        // circle of radius 1 through the square [0.5, 2] x [-0.5, 0.5]
        let want = 2.0 * (0.5f64).acos().min((0.5f64).asin());
        assert!((arc_measure(1.0, 0.5, 2.0, -0.5, 0.5) - want).abs() < 1e-14);
    }

    #[test]
    fn filter_identities_at_origin() {
        for om in [2.5f64, 5.0] {
            let g22 = filter_value(2, 2, om, [0.0, 0.0], 64).unwrap();
            assert!((g22 - PI * om.powi(3) / 2.0).abs() < 1e-10 * g22);
            let g11 = filter_value(1, 1, om, [0.0, 0.0], 64).unwrap();
            let want = kappa(om).norm_sqr() * 2.0 * PI * PI;
            assert!((g11 - want).abs() < 1e-10 * want);
            assert!(filter_value(1, 2, om, [0.0, 0.0], 64).unwrap().abs() < 1e-10);
        }
        assert!(filter_value(3, 1, 2.5, [0.0, 0.0], 64).is_err());
    }

    #[test]
    fn residual_layers_with_zero_filters() {
        let cfg = ProblemConfig::square(8, 0.5).unwrap();
        let bank = FilterBank::new(&cfg, 64).unwrap().zeroed();
        let f = Array2::from_shape_fn((16, 8), |(i, j)| (i * 8 + j) as f64 * 0.01);
        let out = psi1_apply(f.view(), &bank, 0.5).unwrap();
        assert!((out - &f * 0.5).iter().all(|v| v.abs() < 1e-14));
        let id = apply_normal_op(f.view(), &bank, 1.0).unwrap();
        assert!((id - &f).iter().all(|v| v.abs() < 1e-14));
        let z = Array2::zeros((16, 16));
        let out2 = psi2_apply(f.view(), z.view(), 0.5).unwrap();
        assert!((out2 - &f * 4.0).iter().all(|v| v.abs() < 1e-13));
    }

    #[test]
    fn domain_solver_inverts_normal_operator() {
        let cfg = ProblemConfig::square(16, 0.1).unwrap();
        let bank = FilterBank::new(&cfg, 64).unwrap();
        let f = Array2::from_shape_fn((32, 16), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let full = Array2::from_elem((32, 16), 1.0);
        let h = apply_normal_op(f.view(), &bank, 0.1).unwrap();
        let back = DomainSolver::with_mask(&bank, 0.1, full).unwrap().solve(h.view()).unwrap();
        assert!((&back - &f).iter().all(|v| v.abs() < 1e-9));
    }
}
