//! Small dense helpers: norms, power iteration, complex one-sided Jacobi SVD
//! and a cached 2-D FFT.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use num_complex::Complex64 as C64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub fn frob_c(a: ArrayView2<'_, C64>) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn frob(a: ArrayView2<'_, f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn max_abs_c(a: ArrayView2<'_, C64>) -> f64 {
    a.iter().fold(0.0, |m, z| m.max(z.norm()))
}

pub fn max_abs(a: ArrayView2<'_, f64>) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn conj_t(a: ArrayView2<'_, C64>) -> Array2<C64> {
    a.t().mapv(|z| z.conj())
}

pub fn to_complex(a: ArrayView2<'_, f64>) -> Array2<C64> {
    a.mapv(|x| C64::new(x, 0.0))
}

/// Largest singular value by power iteration on `A^H A`.
pub fn spectral_norm_c(a: ArrayView2<'_, C64>) -> f64 {
    let n = a.ncols();
    if n == 0 || a.nrows() == 0 {
        return 0.0;
    }
    // Deterministic, generic start vector.
    let mut v: Array1<C64> = Array1::from_shape_fn(n, |k| C64::new(1.0 + 0.1 * (k as f64).sin(), 0.05 * k as f64));
    let mut sigma = 0.0;
    for _ in 0..500 {
        let nv = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if nv == 0.0 {
            return 0.0;
        }
        v.mapv_inplace(|z| z / nv);
        let av = a.dot(&v);
        let w = a.t().mapv(|z| z.conj()).dot(&av);
        let next = av.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        v = w;
        if (next - sigma).abs() <= 1e-14 * next {
            return next;
        }
        sigma = next;
    }
    sigma
}

pub fn spectral_norm(a: ArrayView2<'_, f64>) -> f64 {
    spectral_norm_c(to_complex(a).view())
}

/// Thin SVD `A = U diag(s) V^H` with singular values sorted descending.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Array2<C64>,
    pub s: Vec<f64>,
    pub v: Array2<C64>,
}

const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 80;

/// One-sided (Hestenes) Jacobi SVD for small complex matrices.
pub fn jacobi_svd(a: ArrayView2<'_, C64>) -> Result<Svd> {
    if a.nrows() < a.ncols() {
        let t = jacobi_svd(conj_t(a).view())?;
        return Ok(Svd { u: t.v, s: t.s, v: t.u });
    }
    let (m, n) = a.dim();
    let mut w = a.to_owned();
    let mut v: Array2<C64> = Array2::eye(n);
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut al, mut be, mut ga) = (0.0, 0.0, C64::new(0.0, 0.0));
                for i in 0..m {
                    let (x, y) = (w[(i, p)], w[(i, q)]);
                    al += x.norm_sqr();
                    be += y.norm_sqr();
                    ga += x.conj() * y;
                }
                let g = ga.norm();
                if g <= JACOBI_TOL * (al * be).sqrt() || g == 0.0 {
                    continue;
                }
                rotated = true;
                let ph = ga / g;
                let zeta = (be - al) / (2.0 * g);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for mat in [&mut w, &mut v] {
                    for i in 0..mat.nrows() {
                        let x = mat[(i, p)];
                        let y = mat[(i, q)] * ph.conj();
                        mat[(i, p)] = x * c - y * s;
                        mat[(i, q)] = (x * s + y * c) * ph;
                    }
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!("Jacobi SVD did not converge in {JACOBI_MAX_SWEEPS} sweeps")));
    }
    let norms: Vec<f64> = w.axis_iter(Axis(1)).map(|c| c.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let mut u = Array2::zeros((m, n));
    let mut vs = Array2::zeros((n, n));
    let mut s = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        let sj = norms[j];
        s.push(sj);
        if sj > 0.0 {
            for i in 0..m {
                u[(i, k)] = w[(i, j)] / sj;
            }
        }
        for i in 0..n {
            vs[(i, k)] = v[(i, j)];
        }
    }
    Ok(Svd { u, s, v: vs })
}

/// Square 2-D FFT of side `n` with cached plans. Unnormalized forward,
/// inverse scaled by `1/n^2`.
#[derive(Clone)]
pub struct Fft2 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2").field("n", &self.n).finish()
    }
}

impl Fft2 {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self { n, fwd: planner.plan_fft_forward(n), inv: planner.plan_fft_inverse(n) }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    fn run(&self, a: &mut Array2<C64>, plan: &Arc<dyn Fft<f64>>) {
        let n = self.n;
        assert_eq!(a.dim(), (n, n), "Fft2 size mismatch");
        let mut scratch = vec![C64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
        {
            let buf = a.as_slice_mut().expect("standard layout");
            for row in buf.chunks_exact_mut(n) {
                plan.process_with_scratch(row, &mut scratch);
            }
        }
        let mut col = vec![C64::new(0.0, 0.0); n];
        for j in 0..n {
            for i in 0..n {
                col[i] = a[(i, j)];
            }
            plan.process_with_scratch(&mut col, &mut scratch);
            for i in 0..n {
                a[(i, j)] = col[i];
            }
        }
    }

    pub fn forward(&self, a: &mut Array2<C64>) {
        self.run(a, &self.fwd);
    }

    pub fn inverse(&self, a: &mut Array2<C64>) {
        self.run(a, &self.inv);
        let s = 1.0 / (self.n * self.n) as f64;
        a.mapv_inplace(|z| z * s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(m: usize, n: usize, seed: u64) -> Array2<C64> {
        let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Array2::from_shape_fn((m, n), |_| {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let a = (x >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let b = (x >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
            C64::new(a, b)
        })
    }

    fn reconstruct(svd: &Svd) -> Array2<C64> {
        let mut us = svd.u.clone();
        for (k, s) in svd.s.iter().enumerate() {
            us.column_mut(k).mapv_inplace(|z| z * *s);
        }
        us.dot(&conj_t(svd.v.view()))
    }

    #[test]
    fn svd_reconstructs_tall_and_wide() {
        for &(m, n) in &[(6, 4), (4, 6), (5, 5), (1, 3)] {
            let a = sample(m, n, (m * 10 + n) as u64);
            let svd = jacobi_svd(a.view()).unwrap();
            let err = frob_c((reconstruct(&svd) - &a).view());
            assert!(err < 1e-12 * frob_c(a.view()), "{m}x{n}: {err}");
            assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
            let utu = conj_t(svd.u.view()).dot(&svd.u);
            let k = svd.s.len();
            assert!(frob_c((utu - Array2::<C64>::eye(k)).view()) < 1e-12);
        }
    }

    #[test]
    fn svd_of_rank_one_has_single_value() {
        let x = sample(5, 1, 3);
        let y = sample(1, 4, 4);
        let a = x.dot(&y);
        let svd = jacobi_svd(a.view()).unwrap();
        assert!(svd.s[1] < 1e-13 * svd.s[0]);
        let want = frob_c(x.view()) * frob_c(y.view());
        assert!((svd.s[0] - want).abs() < 1e-12 * want);
    }

    #[test]
    fn spectral_norm_matches_svd() {
        let a = sample(7, 5, 9);
        let s = jacobi_svd(a.view()).unwrap().s[0];
        assert!((spectral_norm_c(a.view()) - s).abs() < 1e-10 * s);
    }

    #[test]
    fn fft_round_trip() {
        let f = Fft2::new(8);
        let a = sample(8, 8, 2);
        let mut b = a.clone();
        f.forward(&mut b);
        f.inverse(&mut b);
        assert!(frob_c((b - &a).view()) < 1e-13);
    }
}
