//! Two-frequency Born inverse scattering for the Helmholtz equation.
//!
//! The crate recovers a pair of coefficient perturbations `(gamma, eta)` on the
//! unit disc from far-field data measured at two frequencies. It provides the
//! discretized forward operator and its adjoint, the factored polar evaluation
//! of the adjoint with shared kernel weights, a blockwise low-rank (butterfly)
//! compression of that kernel, an FFT Tikhonov solver together with the
//! equivalent two-layer residual convolution, and a small trainable network
//! assembled from those pieces.
//!
//! Indexing convention: documentation counts angles and radii from 1, as in
//! `theta_i = 2*pi*i/n_theta` for `i = 1..=n_theta`; storage is 0-based, so
//! row `r` of any angular array holds angle `2*pi*(r+1)/n_theta`.

pub mod adjoint;
pub mod butterfly;
pub mod checks;
pub mod deconv;
pub mod error;
pub mod forward;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use grid::{CartesianGrid, PolarGrid, ProblemConfig};

/// Complex scalar used throughout.
pub type C64 = num_complex::Complex64;
