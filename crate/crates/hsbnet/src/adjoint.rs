//! Factored polar evaluation of the adjoint: shifted inputs, shared kernel
//! weights `K`, cosine matrix `C` (or its diagonal-phase form), frequency
//! column selection and channel summation.

use std::f64::consts::PI;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use num_complex::Complex64 as C64;

use crate::error::{check_shape, Result};
use crate::forward::{kappa, kappa_bar, FarField};
use crate::grid::{angles, freq_select_map, shift_indices, PolarGrid, ProblemConfig};

/// Phase of `kappa_bar`; the real-arithmetic network keeps it fixed and
/// learns only the modulus of each channel prefactor.
pub const KAPPA_BAR_PHASE: f64 = -PI / 4.0;

/// `K[i, j] = exp(-i omega1 rho_j cos t_i)`, `n_theta x n_rho`.
pub fn kernel_matrix(cfg: &ProblemConfig) -> Array2<C64> {
    let g = PolarGrid::new(cfg);
    Array2::from_shape_fn((cfg.n_theta, cfg.n_rho), |(i, j)| {
        C64::from_polar(1.0, -cfg.omega1 * g.rhos[j] * g.thetas[i].cos())
    })
}

/// `(K_cos, K_sin)` with `K = K_cos - i K_sin`.
pub fn split_kernel(k: ArrayView2<'_, C64>) -> (Array2<f64>, Array2<f64>) {
    (k.mapv(|z| z.re), k.mapv(|z| -z.im))
}

pub fn join_kernel(kc: ArrayView2<'_, f64>, ks: ArrayView2<'_, f64>) -> Array2<C64> {
    ndarray::Zip::from(kc).and(ks).map_collect(|&c, &s| C64::new(c, -s))
}

/// Circulant `C[i, j] = -cos(2 pi (i - j) / n)`.
pub fn cosine_matrix(n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(i, j)| -(2.0 * PI * (i as f64 - j as f64) / n as f64).cos())
}

/// Circulant matrix from its first column: `C[i, j] = c[(i - j) mod n]`.
pub fn circulant(c: &[f64]) -> Array2<f64> {
    let n = c.len();
    Array2::from_shape_fn((n, n), |(i, j)| c[(i + n - j) % n])
}

/// Diagonal of `D = diag(exp(-i theta_i))`.
pub fn diag_phase(n: usize) -> Vec<C64> {
    angles(n).into_iter().map(|t| C64::from_polar(1.0, -t)).collect()
}

/// `-(D^* X D + D X D^*) / 2` for diagonal `D`.
pub fn cosine_via_phase(x: ArrayView2<'_, C64>, d: &[C64]) -> Result<Array2<C64>> {
    let n = d.len();
    check_shape("shifted input", x.dim(), (n, n))?;
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        let a = d[i].conj() * x[(i, j)] * d[j];
        let b = d[i] * x[(i, j)] * d[j].conj();
        -(a + b) * 0.5
    }))
}

fn diag_form(x: ArrayView2<'_, C64>, k: ArrayView2<'_, C64>) -> Array1<C64> {
    // b^T (conj(K) .* (X K))
    let xk = x.dot(&k);
    let mut out = Array1::zeros(k.ncols());
    for ((i, j), v) in xk.indexed_iter() {
        out[j] += k[(i, j)].conj() * v;
    }
    out
}

fn prefactor(omega: f64, n_theta: usize) -> C64 {
    kappa_bar(omega) * (4.0 * PI * PI / (n_theta * n_theta) as f64)
}

/// Row `(4 pi^2 kappa_bar / n^2) b^T (conj(K) .* ((C .* X) K))`, length `n_rho`.
pub fn phi1_row(x: ArrayView2<'_, C64>, k: ArrayView2<'_, C64>, c: ArrayView2<'_, f64>, omega: f64) -> Result<Array1<C64>> {
    let n = k.nrows();
    check_shape("shifted input", x.dim(), (n, n))?;
    check_shape("cosine matrix", c.dim(), (n, n))?;
    let cx = ndarray::Zip::from(x).and(c).map_collect(|&z, &w| z * w);
    Ok(diag_form(cx.view(), k) * prefactor(omega, n))
}

/// As [`phi1_row`] with `C` replaced by the all-ones matrix.
pub fn phi2_row(x: ArrayView2<'_, C64>, k: ArrayView2<'_, C64>, omega: f64) -> Result<Array1<C64>> {
    let n = k.nrows();
    check_shape("shifted input", x.dim(), (n, n))?;
    Ok(diag_form(x, k) * prefactor(omega, n))
}

/// How the cosine weighting is applied inside the first branch.
#[derive(Debug, Clone, Copy)]
pub enum CosineForm<'a> {
    Matrix(ArrayView2<'a, f64>),
    Phase(&'a [C64]),
}

/// Complex output of the polar adjoint network, `2 n_theta x n_c`; the top
/// block is the `gamma` channel, the bottom the `eta` channel.
#[derive(Debug, Clone)]
pub struct Phi0Output {
    pub value: Array2<C64>,
}

impl Phi0Output {
    pub fn real(&self) -> Array2<f64> {
        self.value.mapv(|z| z.re)
    }

    /// Largest imaginary magnitude relative to the largest real magnitude.
    pub fn imag_residual(&self) -> f64 {
        let re = self.value.iter().fold(0.0f64, |m, z| m.max(z.re.abs()));
        let im = self.value.iter().fold(0.0f64, |m, z| m.max(z.im.abs()));
        if re == 0.0 {
            im
        } else {
            im / re
        }
    }
}

/// Full network with the kernel `K` (exact or compressed) and either cosine form.
pub fn phi0_apply_with(lam: &FarField, k: ArrayView2<'_, C64>, cos: CosineForm<'_>, cfg: &ProblemConfig) -> Result<Phi0Output> {
    check_shape("far field", lam.data.dim(), cfg.data_shape())?;
    check_shape("kernel", k.dim(), (cfg.n_theta, cfg.n_rho))?;
    if let CosineForm::Matrix(c) = cos {
        check_shape("cosine matrix", c.dim(), (cfg.n_theta, cfg.n_theta))?;
    }
    if let CosineForm::Phase(d) = cos {
        check_shape("phase diagonal", (d.len(), 1), (cfg.n_theta, 1))?;
    }
    let n = cfg.n_theta;
    let mut out = Array2::zeros(cfg.polar_shape());
    for (w, om) in cfg.omegas().into_iter().enumerate() {
        let cols = freq_select_map(om, cfg)?;
        let ksel = k.select(Axis(1), &cols);
        let pre = prefactor(om, n);
        let blk = lam.block(w);
        for m in 1..=n {
            let xs = shift_indices(m, blk)?;
            let cx = match cos {
                CosineForm::Matrix(c) => ndarray::Zip::from(&xs).and(c).map_collect(|&z, &w| z * w),
                CosineForm::Phase(d) => cosine_via_phase(xs.view(), d)?,
            };
            let r1 = diag_form(cx.view(), ksel.view());
            let r2 = diag_form(xs.view(), ksel.view());
            let mut top = out.slice_mut(s![m - 1, ..]);
            top.zip_mut_with(&r1, |o, &v| *o += pre * v);
            let mut bot = out.slice_mut(s![n + m - 1, ..]);
            bot.zip_mut_with(&r2, |o, &v| *o += pre * v);
        }
    }
    Ok(Phi0Output { value: out })
}

/// Exact-weight network: `phi0_apply_with(lam, K, C)`.
pub fn phi0_apply(lam: &FarField, k: ArrayView2<'_, C64>, c: ArrayView2<'_, f64>, cfg: &ProblemConfig) -> Result<Phi0Output> {
    phi0_apply_with(lam, k, CosineForm::Matrix(c), cfg)
}

/// Channel prefactor moduli `4 pi^2 |kappa(omega)| / n_theta^2`, indexed
/// `[branch][frequency]`.
pub fn initial_scales(cfg: &ProblemConfig) -> [[f64; 2]; 2] {
    let n2 = (cfg.n_theta * cfg.n_theta) as f64;
    let s = cfg.omegas().map(|om| 4.0 * PI * PI * kappa(om).norm() / n2);
    [s, s]
}

/// Real-arithmetic network on `K_cos`, `K_sin` and `C`. Each of the four
/// channels `[branch][frequency]` evaluates
/// `scale * Re(e^{ip} (R + i I)) = scale * (cos(p) R - sin(p) I)` where `R + i I = b^T(conj(K) .* (X K))`
/// is expanded into real products and `p` is [`KAPPA_BAR_PHASE`].
pub fn phi0_real_channels(
    lam: &FarField,
    kc: ArrayView2<'_, f64>,
    ks: ArrayView2<'_, f64>,
    c: ArrayView2<'_, f64>,
    scales: [[f64; 2]; 2],
    cfg: &ProblemConfig,
) -> Result<Array2<f64>> {
    check_shape("far field", lam.data.dim(), cfg.data_shape())?;
    check_shape("K_cos", kc.dim(), (cfg.n_theta, cfg.n_rho))?;
    check_shape("K_sin", ks.dim(), (cfg.n_theta, cfg.n_rho))?;
    check_shape("cosine matrix", c.dim(), (cfg.n_theta, cfg.n_theta))?;
    let n = cfg.n_theta;
    let (cp, sp) = (KAPPA_BAR_PHASE.cos(), KAPPA_BAR_PHASE.sin());
    let mut out = Array2::zeros(cfg.polar_shape());
    for (w, om) in cfg.omegas().into_iter().enumerate() {
        let cols = freq_select_map(om, cfg)?;
        let kcs = kc.select(Axis(1), &cols);
        let kss = ks.select(Axis(1), &cols);
        let blk = lam.block(w);
        for m in 1..=n {
            let xs = shift_indices(m, blk)?;
            let xr = xs.mapv(|z| z.re);
            let xi = xs.mapv(|z| z.im);
            for branch in 0..2 {
                let (ar, ai) = if branch == 0 { (&xr * &c, &xi * &c) } else { (xr.clone(), xi.clone()) };
                let p1 = ar.dot(&kcs);
                let p2 = ar.dot(&kss);
                let p3 = ai.dot(&kcs);
                let p4 = ai.dot(&kss);
                // R = Kc.(P1 + P4) + Ks.(P2 - P3);  I = Kc.(P3 - P2) + Ks.(P1 + P4)
                let re = (&kcs * &(&p1 + &p4) + &kss * &(&p2 - &p3)).sum_axis(Axis(0));
                let im = (&kcs * &(&p3 - &p2) + &kss * &(&p1 + &p4)).sum_axis(Axis(0));
                let row = (re * cp - im * sp) * scales[branch][w];
                let mut dst = out.slice_mut(s![branch * n + m - 1, ..]);
                dst += &row;
            }
        }
    }
    Ok(out)
}

/// The weights a weight layer reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeightKind {
    Cosine,
    Kernel,
    KernelConj,
    /// Summation row with the prefactor of frequency 0 or 1.
    Prefactor(usize),
}

/// Weight layers of the four channels, `(channel, kind)`, channel index
/// `2 * branch + frequency`. The cosine branch has four layers, the other
/// three; every layer of a given kind reads the same storage.
pub fn weight_sites() -> Vec<(usize, WeightKind)> {
    let mut v = Vec::new();
    for branch in 0..2 {
        for w in 0..2 {
            let ch = 2 * branch + w;
            if branch == 0 {
                v.push((ch, WeightKind::Cosine));
            }
            v.push((ch, WeightKind::Kernel));
            v.push((ch, WeightKind::KernelConj));
            v.push((ch, WeightKind::Prefactor(w)));
        }
    }
    v
}

/// Number of independent entries of `K` once rows related by
/// `k(2 pi - t, rho) = k(t, rho)` are identified.
pub fn kernel_free_parameters(k: ArrayView2<'_, C64>) -> usize {
    let n = k.nrows();
    let mut distinct = 0;
    for i in 0..n {
        let mirror = (2 * n - i - 2) % n;
        let dup = mirror < i
            && k.row(i).iter().zip(k.row(mirror).iter()).all(|(a, b)| (a - b).norm() <= 1e-12);
        if !dup {
            distinct += 1;
        }
    }
    distinct * k.ncols()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe(n: usize, seed: u64) -> Array2<C64> {
        let mut x = seed.wrapping_add(0x9E3779B97F4A7C15);
        let mut u = || {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        Array2::from_shape_simple_fn((n, n), || C64::new(u(), u()))
    }

    #[test]
    fn kernel_split_round_trip() {
        let cfg = ProblemConfig::square(8, 1.0).unwrap();
        let k = kernel_matrix(&cfg);
        assert!(k.iter().all(|z| (z.norm() - 1.0).abs() < 1e-15));
        let (kc, ks) = split_kernel(k.view());
        assert_eq!(join_kernel(kc.view(), ks.view()), k);
    }

    #[test]
    fn cosine_matrix_is_symmetric_circulant() {
        let c = cosine_matrix(6);
        for i in 0..6 {
            assert!((c[(i, i)] + 1.0).abs() < 1e-15);
            for j in 0..6 {
                assert!((c[(i, j)] - c[(j, i)]).abs() < 1e-15);
                assert!((c[(i, j)] - c[((i + 1) % 6, (j + 1) % 6)]).abs() < 1e-15);
            }
        }
        let col: Vec<f64> = c.column(0).to_vec();
        assert!((circulant(&col) - &c).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn phase_form_matches_cosine_matrix() {
        let n = 8;
        let x = probe(n, 1);
        let via_d = cosine_via_phase(x.view(), &diag_phase(n)).unwrap();
        let c = cosine_matrix(n);
        for ((i, j), v) in via_d.indexed_iter() {
            assert!((v - x[(i, j)] * c[(i, j)]).norm() < 1e-13);
        }
        let ident = vec![C64::new(1.0, 0.0); n];
        let neg = cosine_via_phase(x.view(), &ident).unwrap();
        assert!(neg.iter().zip(x.iter()).all(|(a, b)| (a + b).norm() < 1e-15));
    }

    #[test]
    fn real_channels_match_complex_network() {
        let cfg = ProblemConfig::square(16, 1.0).unwrap();
        let lam = FarField::new(ndarray::concatenate![Axis(0), probe(16, 3), probe(16, 4)], &cfg).unwrap();
        let k = kernel_matrix(&cfg);
        let c = cosine_matrix(16);
        let want = phi0_apply(&lam, k.view(), c.view(), &cfg).unwrap().real();
        let (kc, ks) = split_kernel(k.view());
        let got = phi0_real_channels(&lam, kc.view(), ks.view(), c.view(), initial_scales(&cfg), &cfg).unwrap();
        let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(scale > 1e-3);
        assert!(want.iter().zip(got.iter()).all(|(a, b)| (a - b).abs() <= 1e-12 * scale));
    }

    #[test]
    fn weight_sites_count() {
        let sites = weight_sites();
        assert_eq!(sites.len(), 14);
        let kinds: std::collections::HashSet<_> = sites.iter().map(|s| s.1).collect();
        assert_eq!(kinds.len(), 5);
    }

    #[test]
    fn zero_input_zero_rows() {
        let cfg = ProblemConfig::square(4, 1.0).unwrap();
        let k = kernel_matrix(&cfg);
        let z = Array2::<C64>::zeros((4, 4));
        assert!(phi1_row(z.view(), k.view(), cosine_matrix(4).view(), 2.5).unwrap().iter().all(|v| v.norm() == 0.0));
        assert!(phi2_row(z.view(), k.view(), 2.5).unwrap().iter().all(|v| v.norm() == 0.0));
    }
}
