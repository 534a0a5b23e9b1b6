//! Problem configuration, polar and Cartesian grids, index shifts, frequency
//! column selection and the polar to Cartesian resampling map.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};

use crate::error::{arg, check_shape, Error, Result};

/// Support radius of the perturbations. Fixed.
pub const SUPPORT_RADIUS: f64 = 1.0;

/// Frequencies, grid sizes and the Tikhonov parameter. Every derived size is
/// computed from here.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemConfig {
    pub omega1: f64,
    pub omega2: f64,
    pub n_theta: usize,
    /// Radial node count, always `(omega2/omega1) * n_c`.
    pub n_rho: usize,
    pub n_c: usize,
    pub alpha: f64,
}

impl ProblemConfig {
    pub fn new(omega1: f64, omega2: f64, n_theta: usize, n_c: usize, alpha: f64) -> Result<Self> {
        if !(omega1 > 0.0 && omega1.is_finite() && omega2.is_finite()) {
            return Err(Error::Config(format!("omega1 must be positive and finite, got {omega1}")));
        }
        if omega2 <= omega1 {
            return Err(Error::Config(format!("need omega1 < omega2, got {omega1} and {omega2}")));
        }
        let ratio = integer_ratio(omega2, omega1)
            .ok_or_else(|| Error::Config(format!("omega2/omega1 = {} is not an integer", omega2 / omega1)))?;
        if n_theta == 0 || n_c == 0 {
            return Err(Error::Config("grid sizes must be positive".into()));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
        }
        let n_rho = ratio * n_c;
        if n_theta > n_rho {
            return Err(Error::Config(format!("n_theta = {n_theta} exceeds n_rho = {n_rho}")));
        }
        Ok(Self { omega1, omega2, n_theta, n_rho, n_c, alpha })
    }

    /// Default profile `n_theta = n_c = n`, `omega = (2.5, 5)`.
    pub fn square(n: usize, alpha: f64) -> Result<Self> {
        Self::new(2.5, 5.0, n, n, alpha)
    }

    pub fn ratio(&self) -> usize {
        self.n_rho / self.n_c
    }

    pub fn omegas(&self) -> [f64; 2] {
        [self.omega1, self.omega2]
    }

    /// Number of output radii, `(omega1/omega2) * n_rho`.
    pub fn out_rho_count(&self) -> usize {
        self.n_c
    }

    /// Shape of the stacked far-field array.
    pub fn data_shape(&self) -> (usize, usize) {
        (2 * self.n_theta, self.n_theta)
    }

    /// Shape of the stacked Cartesian coefficient array.
    pub fn coef_shape(&self) -> (usize, usize) {
        (2 * self.n_c, self.n_c)
    }

    /// Shape of the stacked polar output of the adjoint network.
    pub fn polar_shape(&self) -> (usize, usize) {
        (2 * self.n_theta, self.out_rho_count())
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        Self::new(self.omega1, self.omega2, self.n_theta, self.n_c, alpha)
    }
}

fn integer_ratio(a: f64, b: f64) -> Option<usize> {
    let r = a / b;
    let k = r.round();
    if k >= 1.0 && (r - k).abs() <= 1e-12 * k {
        Some(k as usize)
    } else {
        None
    }
}

/// Uniform angular grid `theta_i = 2*pi*i/n`, `i = 1..=n`.
pub fn angles(n: usize) -> Vec<f64> {
    (1..=n).map(|i| 2.0 * PI * i as f64 / n as f64).collect()
}

#[derive(Debug, Clone)]
pub struct PolarGrid {
    pub thetas: Vec<f64>,
    /// `rho_j = (omega2/omega1) * j / n_rho`, spanning `(0, omega2/omega1]`.
    pub rhos: Vec<f64>,
    pub out_rho_count: usize,
}

impl PolarGrid {
    pub fn new(cfg: &ProblemConfig) -> Self {
        let ratio = cfg.ratio() as f64;
        let rhos = (1..=cfg.n_rho).map(|j| ratio * j as f64 / cfg.n_rho as f64).collect();
        Self { thetas: angles(cfg.n_theta), rhos, out_rho_count: cfg.out_rho_count() }
    }

    /// Physical radii of the output columns, `j / n_c` for `j = 1..=n_c`.
    pub fn out_radii(&self) -> Vec<f64> {
        let n = self.out_rho_count as f64;
        (1..=self.out_rho_count).map(|j| j as f64 / n).collect()
    }
}

/// Pixel centers `(2i-1)/n_c - 1` on `[-1, 1]`. Row index is the first
/// coordinate, column index the second.
#[derive(Debug, Clone, Copy)]
pub struct CartesianGrid {
    pub n_c: usize,
}

impl CartesianGrid {
    pub fn new(n_c: usize) -> Self {
        Self { n_c }
    }

    pub fn coord(&self, i: usize) -> f64 {
        (2 * i + 1) as f64 / self.n_c as f64 - 1.0
    }

    pub fn spacing(&self) -> f64 {
        2.0 / self.n_c as f64
    }

    /// Midpoint quadrature weight of one pixel.
    pub fn cell_area(&self) -> f64 {
        self.spacing() * self.spacing()
    }

    pub fn point(&self, i: usize, j: usize) -> [f64; 2] {
        [self.coord(i), self.coord(j)]
    }

    /// Row-major list of pixel centers.
    pub fn points(&self) -> Vec<[f64; 2]> {
        let n = self.n_c;
        (0..n * n).map(|k| self.point(k / n, k % n)).collect()
    }

    /// Disc indicator at a pixel center.
    pub fn in_disc(&self, i: usize, j: usize) -> bool {
        let [x, y] = self.point(i, j);
        x * x + y * y <= SUPPORT_RADIUS * SUPPORT_RADIUS
    }
}

/// Cyclic diagonal shift: `out[i, j] = a[i + m, j + m]` (1-based, mod n).
///
/// `m` ranges over `1..=n`; `m = n` is the identity.
pub fn shift_indices<T: Copy>(m: usize, a: ArrayView2<'_, T>) -> Result<Array2<T>> {
    let n = a.nrows();
    if a.ncols() != n {
        return arg(format!("shift_indices needs a square matrix, got {}x{}", n, a.ncols()));
    }
    if m == 0 || m > n {
        return arg(format!("shift index m = {m} outside 1..={n}"));
    }
    let s = m % n;
    Ok(Array2::from_shape_fn((n, n), |(i, j)| a[((i + s) % n, (j + s) % n)]))
}

/// Source columns (0-based) selected for frequency `omega`: output radius `j`
/// reads kernel column `(omega/omega1) * j` (1-based).
pub fn freq_select_map(omega: f64, cfg: &ProblemConfig) -> Result<Vec<usize>> {
    let step = integer_ratio(omega, cfg.omega1).ok_or_else(|| {
        Error::Config(format!("omega/omega1 = {} is not an integer", omega / cfg.omega1))
    })?;
    let count = cfg.out_rho_count();
    if step * count > cfg.n_rho {
        return Err(Error::Config(format!(
            "frequency {omega} selects column {} beyond n_rho = {}",
            step * count,
            cfg.n_rho
        )));
    }
    Ok((1..=count).map(|j| step * j - 1).collect())
}

/// Bilinear polar to Cartesian resampling, stored as a sparse map with at most
/// four taps per pixel. Periodic in angle; radii below the first ring reuse
/// the first ring; pixels outside the unit disc receive zero.
#[derive(Debug, Clone)]
pub struct PolarResampler {
    n_theta: usize,
    n_out: usize,
    n_c: usize,
    /// Per pixel (row-major), the `(polar row, polar col, weight)` taps.
    taps: Vec<Vec<(usize, usize, f64)>>,
}

impl PolarResampler {
    pub fn new(cfg: &ProblemConfig) -> Self {
        let n_theta = cfg.n_theta;
        let n_out = cfg.out_rho_count();
        let grid = CartesianGrid::new(cfg.n_c);
        let dtheta = 2.0 * PI / n_theta as f64;
        let taps = grid
            .points()
            .into_iter()
            .map(|[x, y]| {
                let rho = x.hypot(y);
                if rho > SUPPORT_RADIUS {
                    return Vec::new();
                }
                let theta = y.atan2(x).rem_euclid(2.0 * PI);
                // Angular node k (1-based) sits at u = k and lives in row k-1.
                let u = theta / dtheta;
                let k = u.floor();
                let fu = u - k;
                let k = k as usize;
                let row_lo = (k + n_theta - 1) % n_theta;
                let row_hi = k % n_theta;
                // Radial node j (1-based) sits at v = j and lives in column j-1.
                let v = rho * n_out as f64;
                let radial: Vec<(usize, f64)> = if v <= 1.0 {
                    vec![(0, 1.0)]
                } else if v >= n_out as f64 {
                    vec![(n_out - 1, 1.0)]
                } else {
                    let j = v.floor();
                    let fv = v - j;
                    let j = j as usize;
                    vec![(j - 1, 1.0 - fv), (j, fv)]
                };
                let mut out = Vec::with_capacity(4);
                for &(col, wr) in &radial {
                    out.push((row_lo, col, (1.0 - fu) * wr));
                    out.push((row_hi, col, fu * wr));
                }
                out
            })
            .collect();
        Self { n_theta, n_out, n_c: cfg.n_c, taps }
    }

    /// Apply to a stacked `2 n_theta x n_out` field, giving `2 n_c x n_c`.
    pub fn apply(&self, p: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_shape("polar field", p.dim(), (2 * self.n_theta, self.n_out))?;
        let n = self.n_c;
        let mut out = Array2::zeros((2 * n, n));
        for (pix, taps) in self.taps.iter().enumerate() {
            let (i, j) = (pix / n, pix % n);
            for b in 0..2 {
                let mut acc = 0.0;
                for &(r, c, w) in taps {
                    acc += w * p[(b * self.n_theta + r, c)];
                }
                out[(b * n + i, j)] = acc;
            }
        }
        Ok(out)
    }

    /// Transpose map, `2 n_c x n_c` back to `2 n_theta x n_out`.
    pub fn apply_transpose(&self, q: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let n = self.n_c;
        check_shape("Cartesian field", q.dim(), (2 * n, n))?;
        let mut out = Array2::zeros((2 * self.n_theta, self.n_out));
        for (pix, taps) in self.taps.iter().enumerate() {
            let (i, j) = (pix / n, pix % n);
            for b in 0..2 {
                let v = q[(b * n + i, j)];
                for &(r, c, w) in taps {
                    out[(b * self.n_theta + r, c)] += w * v;
                }
            }
        }
        Ok(out)
    }
}

/// One-shot resampling; see [`PolarResampler`].
pub fn polar_to_cartesian(p: ArrayView2<'_, f64>, cfg: &ProblemConfig) -> Result<Array2<f64>> {
    PolarResampler::new(cfg).apply(p)
}
