//! Blockwise low-rank approximation of the kernel matrix and its middle-level
//! butterfly factorization `K_r = U M V`.

use std::f64::consts::PI;

use ndarray::{s, Array2, ArrayView2, Axis};
use num_complex::Complex64 as C64;
use rayon::prelude::*;

use crate::adjoint::{cosine_via_phase, CosineForm, Phi0Output};
use crate::error::{arg, check_shape, Error, Result};
use crate::forward::{kappa_bar, FarField};
use crate::grid::{freq_select_map, shift_indices, ProblemConfig};
use crate::linalg::jacobi_svd;

/// Rank and block count of the blockwise approximation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LowRankKernelSpec {
    pub r: usize,
    pub n_r: usize,
}

impl LowRankKernelSpec {
    pub fn validate(&self, n_theta: usize, n_rho: usize) -> Result<()> {
        if self.r == 0 || self.n_r == 0 {
            return Err(Error::Config("rank and block count must be positive".into()));
        }
        if n_theta % self.n_r != 0 || n_rho % self.n_r != 0 {
            return Err(Error::Config(format!(
                "{} blocks do not divide a {n_theta}x{n_rho} kernel",
                self.n_r
            )));
        }
        Ok(())
    }

    /// Expansion center `(tau_p, rho_q)` of block `(p, q)` (0-based).
    pub fn center(&self, p: usize, q: usize, cfg: &ProblemConfig) -> (f64, f64) {
        let nr = self.n_r as f64;
        let tau = PI * (2 * p + 1) as f64 / nr;
        let rho = cfg.omega2 / (2.0 * cfg.omega1) * (2 * q + 1) as f64 / nr;
        (tau, rho)
    }

    /// Max-entry error bound `(pi omega2 / 2)^r / r! * n_r^(-2r)`.
    pub fn error_bound(&self, omega2: f64) -> f64 {
        let r = self.r as i32;
        let fact: f64 = (1..=self.r).map(|k| k as f64).product();
        (PI * omega2 / 2.0).powi(r) / fact * (self.n_r as f64).powi(-2 * r)
    }
}

/// Rank-`r` Taylor expansion of `exp(-i omega1 rho cos t)` about `(t0, rho0)`.
pub fn taylor_kernel(t: f64, rho: f64, t0: f64, rho0: f64, r: usize, omega1: f64) -> C64 {
    let dc = t.cos() - t0.cos();
    let x = C64::new(0.0, -omega1) * dc * (rho - rho0);
    let mut term = C64::new(1.0, 0.0);
    let mut acc = C64::new(0.0, 0.0);
    for l in 0..r {
        if l > 0 {
            term *= x / l as f64;
        }
        acc += term;
    }
    acc * C64::from_polar(1.0, -omega1 * rho0 * dc) * C64::from_polar(1.0, -omega1 * rho * t0.cos())
}

/// `K_r = U M V` with block-diagonal `U`, `V` and a block-sparse routing core
/// `M`. Block `(i, j)` of `M` is nonzero only at its sub-block `(j, i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ButterflyFactor {
    pub n_theta: usize,
    pub n_rho: usize,
    pub spec: LowRankKernelSpec,
    /// `n_r` blocks of shape `(n_theta/n_r) x (n_r r)`; column `j r + k` of
    /// block `i` is the `k`-th left factor of kernel block `(i, j)`.
    pub u: Vec<Array2<C64>>,
    /// `n_r^2` diagonal payloads of shape `r x r`, index `i n_r + j`.
    pub m: Vec<Array2<C64>>,
    /// `n_r` blocks of shape `(n_r r) x (n_rho/n_r)`; row `i r + k` of block
    /// `j` is the `k`-th right factor of kernel block `(i, j)`.
    pub v: Vec<Array2<C64>>,
}

impl ButterflyFactor {
    fn bt(&self) -> usize {
        self.n_theta / self.spec.n_r
    }

    fn br(&self) -> usize {
        self.n_rho / self.spec.n_r
    }

    /// Structural nonzeros of `U`, `M`, `V`. Each `M` payload is diagonal, so
    /// it contributes `r` entries.
    pub fn nnz(&self) -> (usize, usize, usize) {
        let count = |v: &[Array2<C64>]| v.iter().map(|a| a.len()).sum();
        let diag: usize = self.m.iter().map(|a| a.nrows().min(a.ncols())).sum();
        (count(&self.u), diag, count(&self.v))
    }

    /// Dense dimensions of `U`, `M`, `V`.
    pub fn dims(&self) -> [(usize, usize); 3] {
        let (nr, r) = (self.spec.n_r, self.spec.r);
        [(self.n_theta, nr * nr * r), (nr * nr * r, nr * nr * r), (nr * nr * r, self.n_rho)]
    }

    /// `K_r X` for `X` of shape `n_rho x cols`: `V`, then `M`, then `U`.
    pub fn apply(&self, x: ArrayView2<'_, C64>) -> Result<Array2<C64>> {
        if x.nrows() != self.n_rho {
            return arg(format!("butterfly apply: expected {} rows, got {}", self.n_rho, x.nrows()));
        }
        let (nr, r, bt, br) = (self.spec.n_r, self.spec.r, self.bt(), self.br());
        let cols = x.ncols();
        // yv[j] rows indexed (i, k)
        let yv: Vec<Array2<C64>> = (0..nr).map(|j| self.v[j].dot(&x.slice(s![j * br..(j + 1) * br, ..]))).collect();
        let mut out = Array2::zeros((self.n_theta, cols));
        for i in 0..nr {
            let mut z = Array2::zeros((nr * r, cols));
            for j in 0..nr {
                let src = yv[j].slice(s![i * r..(i + 1) * r, ..]);
                z.slice_mut(s![j * r..(j + 1) * r, ..]).assign(&self.m[i * nr + j].dot(&src));
            }
            out.slice_mut(s![i * bt..(i + 1) * bt, ..]).assign(&self.u[i].dot(&z));
        }
        Ok(out)
    }

    /// `X K_r` for `X` of shape `rows x n_theta`: `U`, then `M`, then `V`.
    pub fn apply_right(&self, x: ArrayView2<'_, C64>) -> Result<Array2<C64>> {
        if x.ncols() != self.n_theta {
            return arg(format!("butterfly apply_right: expected {} columns, got {}", self.n_theta, x.ncols()));
        }
        let (nr, r, bt, br) = (self.spec.n_r, self.spec.r, self.bt(), self.br());
        let rows = x.nrows();
        let zu: Vec<Array2<C64>> = (0..nr).map(|i| x.slice(s![.., i * bt..(i + 1) * bt]).dot(&self.u[i])).collect();
        let mut out = Array2::zeros((rows, self.n_rho));
        for j in 0..nr {
            let mut w = Array2::zeros((rows, nr * r));
            for i in 0..nr {
                let src = zu[i].slice(s![.., j * r..(j + 1) * r]);
                w.slice_mut(s![.., i * r..(i + 1) * r]).assign(&src.dot(&self.m[i * nr + j]));
            }
            out.slice_mut(s![.., j * br..(j + 1) * br]).assign(&w.dot(&self.v[j]));
        }
        Ok(out)
    }

    /// `K_r^H X` for `X` of shape `n_theta x cols`.
    pub fn apply_adjoint(&self, x: ArrayView2<'_, C64>) -> Result<Array2<C64>> {
        let xh = x.t().mapv(|z| z.conj());
        Ok(self.apply_right(xh.view())?.t().mapv(|z| z.conj()))
    }

    /// Dense `U M V`, assembled through [`Self::apply`].
    pub fn dense(&self) -> Array2<C64> {
        self.apply(Array2::eye(self.n_rho).view()).expect("square identity has matching rows")
    }

    /// Dense `U`, `M`, `V` (tests and diagnostics only).
    pub fn dense_factors(&self) -> [Array2<C64>; 3] {
        let (nr, r, bt, br) = (self.spec.n_r, self.spec.r, self.bt(), self.br());
        let [du, dm, dv] = self.dims();
        let mut u = Array2::zeros(du);
        let mut m = Array2::zeros(dm);
        let mut v = Array2::zeros(dv);
        let w = nr * r;
        for i in 0..nr {
            u.slice_mut(s![i * bt..(i + 1) * bt, i * w..(i + 1) * w]).assign(&self.u[i]);
            v.slice_mut(s![i * w..(i + 1) * w, i * br..(i + 1) * br]).assign(&self.v[i]);
            for j in 0..nr {
                let (r0, c0) = (i * w + j * r, j * w + i * r);
                m.slice_mut(s![r0..r0 + r, c0..c0 + r]).assign(&self.m[i * nr + j]);
            }
        }
        [u, m, v]
    }
}

/// Best rank-`r` approximation of every `n_r x n_r` block by truncated SVD,
/// returned densely and as a butterfly factor.
pub fn block_truncate(k: ArrayView2<'_, C64>, spec: LowRankKernelSpec) -> Result<(Array2<C64>, ButterflyFactor)> {
    let (n_theta, n_rho) = k.dim();
    spec.validate(n_theta, n_rho)?;
    let (nr, r) = (spec.n_r, spec.r);
    let (bt, br) = (n_theta / nr, n_rho / nr);
    let blocks: Vec<(usize, usize)> = (0..nr).flat_map(|i| (0..nr).map(move |j| (i, j))).collect();
    let svds = blocks
        .par_iter()
        .map(|&(i, j)| {
            let blk = k.slice(s![i * bt..(i + 1) * bt, j * br..(j + 1) * br]);
            jacobi_svd(blk).map_err(|e| Error::Numerical(format!("block ({i}, {j}): {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut u: Vec<Array2<C64>> = (0..nr).map(|_| Array2::zeros((bt, nr * r))).collect();
    let mut v: Vec<Array2<C64>> = (0..nr).map(|_| Array2::zeros((nr * r, br))).collect();
    let mut m: Vec<Array2<C64>> = Vec::with_capacity(nr * nr);
    let mut kr = Array2::zeros((n_theta, n_rho));
    for (&(i, j), svd) in blocks.iter().zip(&svds) {
        let keep = r.min(svd.s.len());
        let mut payload = Array2::zeros((r, r));
        for kk in 0..keep {
            payload[(kk, kk)] = C64::new(svd.s[kk], 0.0);
            u[i].slice_mut(s![.., j * r + kk]).assign(&svd.u.column(kk));
            v[j].slice_mut(s![i * r + kk, ..]).assign(&svd.v.column(kk).mapv(|z| z.conj()));
        }
        m.push(payload);
        let mut blk = kr.slice_mut(s![i * bt..(i + 1) * bt, j * br..(j + 1) * br]);
        for kk in 0..keep {
            let uc = svd.u.column(kk);
            let vc = svd.v.column(kk);
            for a in 0..bt {
                for b in 0..br {
                    blk[(a, b)] += uc[a] * svd.s[kk] * vc[b].conj();
                }
            }
        }
    }
    Ok((kr, ButterflyFactor { n_theta, n_rho, spec, u, m, v }))
}

/// Dense blockwise Taylor approximation (the analytic construction).
pub fn taylor_matrix(cfg: &ProblemConfig, spec: LowRankKernelSpec) -> Result<Array2<C64>> {
    spec.validate(cfg.n_theta, cfg.n_rho)?;
    let g = crate::grid::PolarGrid::new(cfg);
    let (bt, br) = (cfg.n_theta / spec.n_r, cfg.n_rho / spec.n_r);
    Ok(Array2::from_shape_fn((cfg.n_theta, cfg.n_rho), |(i, j)| {
        let (t0, r0) = spec.center(i / bt, j / br, cfg);
        taylor_kernel(g.thetas[i], g.rhos[j], t0, r0, spec.r, cfg.omega1)
    }))
}

/// Polar adjoint network with the kernel products routed through the
/// butterfly factor.
pub fn phi1_apply(lam: &FarField, bf: &ButterflyFactor, cos: CosineForm<'_>, cfg: &ProblemConfig) -> Result<Phi0Output> {
    check_shape("far field", lam.data.dim(), cfg.data_shape())?;
    if bf.n_theta != cfg.n_theta || bf.n_rho != cfg.n_rho {
        return arg("butterfly factor does not match the configuration");
    }
    let n = cfg.n_theta;
    let kr = bf.dense();
    let mut out = Array2::zeros(cfg.polar_shape());
    for (w, om) in cfg.omegas().into_iter().enumerate() {
        let cols = freq_select_map(om, cfg)?;
        let ksel = kr.select(Axis(1), &cols);
        let pre = kappa_bar(om) * (4.0 * PI * PI / (n * n) as f64);
        let blk = lam.block(w);
        for m in 1..=n {
            let xs = shift_indices(m, blk)?;
            let cx = match cos {
                CosineForm::Matrix(c) => ndarray::Zip::from(&xs).and(c).map_collect(|&z, &w| z * w),
                CosineForm::Phase(d) => cosine_via_phase(xs.view(), d)?,
            };
            for (branch, x) in [cx, xs].iter().enumerate() {
                let xk = bf.apply_right(x.view())?.select(Axis(1), &cols);
                let row = (&xk * &ksel.mapv(|z| z.conj())).sum_axis(Axis(0));
                let mut dst = out.slice_mut(s![branch * n + m - 1, ..]);
                dst.zip_mut_with(&row, |o, &v| *o += pre * v);
            }
        }
    }
    Ok(Phi0Output { value: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::kernel_matrix;

    #[test]
    fn taylor_exact_at_centers() {
        let (om, t0, r0) = (2.5, 0.7, 0.9);
        for r in 1..5 {
            for t in [0.3f64, 1.1] {
                let k = C64::from_polar(1.0, -om * r0 * t.cos());
                assert!((taylor_kernel(t, r0, t0, r0, r, om) - k).norm() < 1e-14);
            }
            for rho in [0.5, 1.4] {
                let k = C64::from_polar(1.0, -om * rho * t0.cos());
                assert!((taylor_kernel(t0, rho, t0, r0, r, om) - k).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn full_rank_truncation_is_exact() {
        let cfg = ProblemConfig::square(8, 1.0).unwrap();
        let k = kernel_matrix(&cfg);
        let (kr, bf) = block_truncate(k.view(), LowRankKernelSpec { r: 4, n_r: 2 }).unwrap();
        assert!((&kr - &k).iter().all(|z| z.norm() < 1e-12));
        assert!((bf.dense() - &k).iter().all(|z| z.norm() < 1e-12));
    }

    #[test]
    fn rejects_bad_divisibility() {
        let cfg = ProblemConfig::square(8, 1.0).unwrap();
        let k = kernel_matrix(&cfg);
        assert!(block_truncate(k.view(), LowRankKernelSpec { r: 2, n_r: 3 }).is_err());
        assert!(block_truncate(k.view(), LowRankKernelSpec { r: 0, n_r: 2 }).is_err());
    }

    #[test]
    fn constant_blocks_rank_one() {
        let k = Array2::from_elem((4, 8), C64::new(0.5, -0.25));
        let (kr, _) = block_truncate(k.view(), LowRankKernelSpec { r: 1, n_r: 2 }).unwrap();
        assert!((&kr - &k).iter().all(|z| z.norm() < 1e-14));
    }

    #[test]
    fn nonzero_counts() {
        let cfg = ProblemConfig::square(16, 1.0).unwrap();
        let spec = LowRankKernelSpec { r: 3, n_r: 4 };
        let (_, bf) = block_truncate(kernel_matrix(&cfg).view(), spec).unwrap();
        let (nu, nm, nv) = bf.nnz();
        assert_eq!(nu, 16 * 4 * 3);
        assert_eq!(nv, 32 * 4 * 3);
        assert_eq!(nm, 16 * 3);
        assert_eq!(nu + nm + nv, (16 + 32 + 4) * 4 * 3);
    }
}
