//! Numerical checks shared by the acceptance target and the `verify` command.
//! Each check measures a quantity, compares it with a fixed threshold and
//! reports both.

use std::time::{Duration, Instant};

use ndarray::Array2;
use num_complex::Complex64 as C64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::adjoint::{cosine_matrix, diag_phase, kernel_matrix, phi0_apply};
use crate::butterfly::{block_truncate, LowRankKernelSpec};
use crate::deconv::{apply_normal_op, filter_value, psi1_apply, DomainSolver, psi2_apply, FilterBank, Reconstructor, SymbolField, TorusSolver, DEFAULT_NQ, DEFAULT_PAD};
use crate::error::Result;
use crate::forward::{gen_dataset, gen_gaussian, BornOperator, CoefPair, DatasetSpec, FarField, GaussianMixtureSpec};
use crate::grid::{angles, CartesianGrid, ProblemConfig};
use crate::linalg::{frob, frob_c, max_abs, max_abs_c, spectral_norm_c};
use crate::train::{
    finite_difference_check, lipschitz_check, probe_params, train, AdjointKernel, AdjointParams, CosineParam, KernelMode, LipschitzBounds, NetConfig, Network,
    TrainConfig, DEFAULT_IMPULSE_GAIN,
};
use crate::rng::{field, stream};

/// Seed used by every check.
pub const CHECK_SEED: u64 = 20240611;

/// A small table emitted alongside a check (for example a convergence table).
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub id: usize,
    pub name: &'static str,
    pub pass: bool,
    /// Measured values against thresholds, one line.
    pub summary: String,
    pub elapsed: Duration,
    pub table: Option<Table>,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "[{}] {:>2} {:<28} {} ({:.1} s)",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.summary,
            self.elapsed.as_secs_f64()
        )
    }
}

fn timed(id: usize, name: &'static str, f: impl FnOnce() -> Result<(bool, String, Option<Table>)>) -> CheckOutcome {
    let t0 = Instant::now();
    let (pass, summary, table) = match f() {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}"), None),
    };
    CheckOutcome { id, name, pass, summary, elapsed: t0.elapsed(), table }
}

fn normal_c(rng: &mut impl Rng) -> C64 {
    C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
}

fn random_far_field(cfg: &ProblemConfig, index: u64) -> Result<FarField> {
    let mut rng = stream(CHECK_SEED, index, field::PROBE);
    let (r, c) = cfg.data_shape();
    FarField::new(Array2::from_shape_fn((r, c), |_| normal_c(&mut rng)), cfg)
}

fn smooth_pair(n_c: usize, index: u64) -> CoefPair {
    gen_gaussian(&GaussianMixtureSpec::default(), n_c, CHECK_SEED, index)
}

/// Polar output points `(theta_m, j/n_c)`, ordered `m`-major.
pub fn polar_points(cfg: &ProblemConfig) -> Vec<[f64; 2]> {
    let mut pts = Vec::with_capacity(cfg.n_theta * cfg.n_c);
    for t in angles(cfg.n_theta) {
        for j in 1..=cfg.n_c {
            let rho = j as f64 / cfg.n_c as f64;
            pts.push([rho * t.cos(), rho * t.sin()]);
        }
    }
    pts
}

/// Adjoint quadrature at the polar output points in the `2 n_theta x n_c`
/// layout of the network output.
pub fn polar_adjoint(op: &BornOperator, lam: &Array2<C64>, n_theta: usize, n_c: usize) -> Result<Array2<C64>> {
    let (g, h) = op.adjoint_points(lam.view())?;
    let mut out = Array2::zeros((2 * n_theta, n_c));
    for p in 0..n_theta * n_c {
        out[(p / n_c, p % n_c)] = g[p];
        out[(n_theta + p / n_c, p % n_c)] = h[p];
    }
    Ok(out)
}

/// 1. Weighted inner-product identity of the forward operator and its adjoint.
pub fn adjoint_identity() -> CheckOutcome {
    timed(1, "adjoint identity", || {
        let cfg = ProblemConfig::square(16, 1.0)?;
        let op = BornOperator::new(&cfg);
        let (q, w) = (op.angular_weight(), op.point_weight());
        let np = op.n_points();
        let mut worst: f64 = 0.0;
        for t in 0..20u64 {
            let mut rng = stream(CHECK_SEED, t, field::GAMMA);
            let g: Vec<C64> = (0..np).map(|_| normal_c(&mut rng)).collect();
            let e: Vec<C64> = (0..np).map(|_| normal_c(&mut rng)).collect();
            let y = random_far_field(&cfg, 100 + t)?;
            let fx = op.apply_complex(&g, &e)?;
            let (ga, ea) = op.adjoint_points(y.data.view())?;
            let lhs: C64 = fx.iter().zip(y.data.iter()).map(|(a, b)| a * b.conj()).sum::<C64>() * q;
            let rhs: C64 = g.iter().zip(&ga).chain(e.iter().zip(&ea)).map(|(a, b)| a * b.conj()).sum::<C64>() * w;
            let scale = q.sqrt() * frob_c(fx.view()) * q.sqrt() * frob_c(y.data.view());
            worst = worst.max((lhs - rhs).norm() / scale);
        }
        let tol = 1e-10;
        Ok((worst <= tol, format!("max relative defect {worst:.3e} <= {tol:.0e} over 20 pairs"), None))
    })
}

/// 2. The factored polar network equals the direct adjoint at the polar points.
pub fn polar_equals_direct() -> CheckOutcome {
    timed(2, "polar network = adjoint", || {
        let mut worst: f64 = 0.0;
        for (t, n) in [8usize, 16, 32].into_iter().enumerate() {
            let cfg = ProblemConfig::square(n, 1.0)?;
            let lam = random_far_field(&cfg, 200 + t as u64)?;
            let net = phi0_apply(&lam, kernel_matrix(&cfg).view(), cosine_matrix(n).view(), &cfg)?;
            let op = BornOperator::with_points(&cfg, &polar_points(&cfg), 1.0);
            let direct = polar_adjoint(&op, &lam.data, n, cfg.n_c)?;
            let err = max_abs_c((&net.value - &direct).view()) / max_abs_c(direct.view());
            worst = worst.max(err);
        }
        let tol = 1e-10;
        Ok((worst <= tol, format!("max relative difference {worst:.3e} <= {tol:.0e}, n_theta in {{8,16,32}}"), None))
    })
}

/// Sup error of the network at `n_theta` against a reference with four times
/// as many angles, for one smooth pair. The far field is synthesized with the
/// same spatial quadrature at every angular resolution.
pub fn angular_refinement_error(n_theta: usize, n_c: usize, pair: &CoefPair) -> Result<f64> {
    let quad = CartesianGrid::new(pair.n_c());
    let pts = quad.points();
    let g: Vec<C64> = pair.gamma().iter().map(|&x| C64::new(x, 0.0)).collect();
    let e: Vec<C64> = pair.eta().iter().map(|&x| C64::new(x, 0.0)).collect();

    let cfg = ProblemConfig::new(2.5, 5.0, n_theta, n_c, 1.0)?;
    let lam = BornOperator::with_points(&cfg, &pts, quad.cell_area()).apply_complex(&g, &e)?;
    let net = phi0_apply(&FarField::new(lam, &cfg)?, kernel_matrix(&cfg).view(), cosine_matrix(n_theta).view(), &cfg)?;

    let fine = ProblemConfig::new(2.5, 5.0, 4 * n_theta, (2 * n_theta).max(n_c), 1.0)?;
    let lam_fine = BornOperator::with_points(&fine, &pts, quad.cell_area()).apply_complex(&g, &e)?;
    let at_coarse = BornOperator::with_points(&fine, &polar_points(&cfg), 1.0);
    let reference = polar_adjoint(&at_coarse, &lam_fine, n_theta, n_c)?.mapv(|z| z.re);
    Ok(max_abs((&net.real() - &reference).view()))
}

/// 3. First-order decay of the polar network error under angular refinement.
pub fn angular_rate() -> CheckOutcome {
    timed(3, "angular refinement rate", || {
        let sizes = [16usize, 32, 64];
        let mut table = Table {
            header: ["pair", "n_theta", "sup_error", "ratio"].map(String::from).to_vec(),
            rows: vec![],
        };
        let mut ratio_sum = [0.0; 2];
        for t in 0..3u64 {
            let pair = smooth_pair(64, 300 + t);
            let errs: Vec<f64> = sizes.iter().map(|&n| angular_refinement_error(n, 32, &pair)).collect::<Result<_>>()?;
            for (k, &n) in sizes.iter().enumerate() {
                let ratio = if k == 0 { f64::NAN } else { errs[k - 1] / errs[k] };
                table.rows.push(vec![t as f64, n as f64, errs[k], ratio]);
                if k > 0 {
                    ratio_sum[k - 1] += ratio / 3.0;
                }
            }
        }
        let ok = ratio_sum.iter().all(|r| (1.6..=2.6).contains(r));
        Ok((
            ok,
            format!("mean ratios {:.3e}, {:.3e} (16->32->64) in [1.6, 2.6]", ratio_sum[0], ratio_sum[1]),
            Some(table),
        ))
    })
}

/// 4. Blockwise SVD truncation error against the analytic bound, factor
/// consistency and nonzero counts.
pub fn low_rank_bound() -> CheckOutcome {
    timed(4, "low-rank kernel bound", || {
        let mut ok = true;
        let mut worst_ratio: f64 = 0.0;
        let mut worst_fact: f64 = 0.0;
        let mut table = Table {
            header: ["omega2", "r", "n_r", "observed", "bound"].map(String::from).to_vec(),
            rows: vec![],
        };
        for omega2 in [5.0, 10.0] {
            let cfg = ProblemConfig::new(omega2 / 2.0, omega2, 64, 64, 1.0)?;
            let k = kernel_matrix(&cfg);
            for (r, n_r) in [(2, 2), (4, 4), (6, 4), (4, 8)] {
                let spec = LowRankKernelSpec { r, n_r };
                let (kr, bf) = block_truncate(k.view(), spec)?;
                let observed = max_abs_c((&k - &kr).view());
                let bound = spec.error_bound(omega2);
                worst_ratio = worst_ratio.max(observed / bound);
                ok &= observed <= bound;
                let fact = max_abs_c((&bf.dense() - &kr).view());
                worst_fact = worst_fact.max(fact);
                ok &= fact <= 1e-12;
                let (nu, nm, nv) = bf.nnz();
                ok &= nu + nm + nv == (cfg.n_theta + cfg.n_rho + n_r) * n_r * r;
                table.rows.push(vec![omega2, r as f64, n_r as f64, observed, bound]);
            }
        }
        Ok((
            ok,
            format!("max observed/bound {worst_ratio:.3e} <= 1; max |UMV - K_r| {worst_fact:.1e} <= 1e-12; nnz counts checked"),
            Some(table),
        ))
    })
}

/// 5. Determinant of the symbol, filter symmetry and closed-form filter values.
pub fn symbol_determinant() -> CheckOutcome {
    timed(5, "symbol determinant", || {
        let n_c = 64;
        let cfg = ProblemConfig::square(n_c, 1.0)?;
        let symbol = SymbolField::new(cfg.omegas(), 2 * n_c, 2.0 / n_c as f64);
        let edge = 2.0 * cfg.omega2 + symbol.cell();
        let (mut lower, mut outside): (f64, f64) = (f64::INFINITY, 0.0);
        for alpha in [0.1, 1.0] {
            let det = symbol.det_field(alpha);
            let a2 = alpha * alpha;
            for ((a, b), &d) in det.indexed_iter() {
                lower = lower.min(d / a2);
                if symbol.radius(a, b) > edge {
                    outside = outside.max((d - a2).abs() / a2);
                }
            }
        }
        let mut radial: f64 = 0.0;
        let mut g12: f64 = 0.0;
        let mut g22: f64 = 0.0;
        for om in cfg.omegas() {
            for (j, jp) in [(1, 1), (1, 2), (2, 2)] {
                let axis: Vec<f64> = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0], [0.6, 0.8], [-0.8, 0.6]]
                    .iter()
                    .map(|&y| filter_value(j, jp, om, y, DEFAULT_NQ))
                    .collect::<Result<_>>()?;
                let scale = filter_value(j, jp, om, [0.0, 0.0], DEFAULT_NQ)?.abs().max(1.0);
                for v in &axis {
                    radial = radial.max((v - axis[0]).abs() / scale);
                }
            }
            g12 = g12.max(filter_value(1, 2, om, [0.0, 0.0], DEFAULT_NQ)?.abs());
            let want = std::f64::consts::PI * om.powi(3) / 2.0;
            g22 = g22.max((filter_value(2, 2, om, [0.0, 0.0], DEFAULT_NQ)? - want).abs() / want);
        }
        let ok = lower >= 1.0 - 1e-8 && outside <= 1e-6 && radial <= 1e-6 && g12 <= 1e-10 && g22 <= 1e-8;
        Ok((
            ok,
            format!(
                "min det/alpha^2 {lower:.12} >= 1-1e-8; outside disc {outside:.1e} <= 1e-6; radial {radial:.1e} <= 1e-6; g12(0) {g12:.1e} <= 1e-10; g22(0) rel {g22:.1e} <= 1e-8"
            ),
            None,
        ))
    })
}

fn random_coef(n_c: usize, index: u64) -> Array2<f64> {
    let mut rng = stream(CHECK_SEED, index, field::PROBE);
    Array2::from_shape_fn((2 * n_c, n_c), |_| rng.sample(StandardNormal))
}

/// 6. Padded-torus normal operator followed by the Tikhonov solve.
pub fn tikhonov_round_trip() -> CheckOutcome {
    timed(6, "Tikhonov round trip", || {
        let alpha = 0.5;
        let (mut torus, mut domain): (f64, f64) = (0.0, 0.0);
        for (t, n_c) in [32usize, 64].into_iter().enumerate() {
            let cfg = ProblemConfig::square(n_c, alpha)?;
            let f = random_coef(n_c, 600 + t as u64);
            let rel = |x: &Array2<f64>| frob((x - &f).view()) / frob(f.view());

            let solver = TorusSolver::new(&cfg, DEFAULT_PAD, alpha)?;
            let h = solver.normal_op_padded(&solver.pad(f.view())?)?;
            torus = torus.max(rel(&solver.restrict(&solver.solve_padded(&h)?)));

            let bank = FilterBank::new(&cfg, DEFAULT_NQ)?;
            let h = apply_normal_op(f.view(), &bank, alpha)?;
            let full = Array2::from_elem(f.dim(), 1.0);
            domain = domain.max(rel(&DomainSolver::with_mask(&bank, alpha, full)?.solve(h.view())?));
        }
        let tol = 1e-8;
        Ok((
            torus <= tol && domain <= tol,
            format!("padded torus {torus:.3e}, pixel domain {domain:.3e} <= {tol:.0e}, n_c in {{32,64}}"),
            None,
        ))
    })
}

/// Sup error of the two-layer convolution network against the Tikhonov
/// solve, relative to the input sup norm.
pub fn residual_layers_error(n_c: usize, alpha: f64, input: &Array2<f64>) -> Result<f64> {
    let cfg = ProblemConfig::square(n_c, alpha)?;
    let bank = FilterBank::new(&cfg, DEFAULT_NQ)?;
    let solver = TorusSolver::new(&cfg, DEFAULT_PAD, alpha)?;
    let exact = solver.tikhonov_solve(input.view())?;
    let mid = psi1_apply(input.view(), &bank, alpha)?;
    let net = psi2_apply(mid.view(), solver.g2_alpha_kernel().view(), alpha)?;
    Ok(max_abs((&net - &exact).view()) / max_abs(input.view()))
}

/// 7. First-order decay of the residual-layer error under grid refinement.
pub fn residual_layers_rate() -> CheckOutcome {
    timed(7, "residual layers rate", || {
        let sizes = [32usize, 64, 128];
        let alpha = 0.5;
        let mut table = Table {
            header: ["pair", "n_c", "sup_error", "ratio"].map(String::from).to_vec(),
            rows: vec![],
        };
        let mut ratio_sum = [0.0; 2];
        for t in 0..3u64 {
            let errs: Vec<f64> = sizes
                .iter()
                .map(|&n| residual_layers_error(n, alpha, &smooth_pair(n, 700 + t).data))
                .collect::<Result<_>>()?;
            for (k, &n) in sizes.iter().enumerate() {
                let ratio = if k == 0 { f64::NAN } else { errs[k - 1] / errs[k] };
                table.rows.push(vec![t as f64, n as f64, errs[k], ratio]);
                if k > 0 {
                    ratio_sum[k - 1] += ratio / 3.0;
                }
            }
        }
        let ok = ratio_sum.iter().all(|r| (1.5..=2.7).contains(r));
        Ok((
            ok,
            format!("mean ratios {:.3}, {:.3} (32->64->128) in [1.5, 2.7]", ratio_sum[0], ratio_sum[1]),
            Some(table),
        ))
    })
}

/// Network configurations covered by the gradient check: both kernel
/// modes, both cosine forms, with and without rectifier.
pub fn gradient_configs(problem: &ProblemConfig) -> Vec<NetConfig> {
    let mut out = Vec::new();
    for kernel in [KernelMode::Dense, KernelMode::Butterfly(LowRankKernelSpec { r: 2, n_r: 4 })] {
        for cosine in [CosineParam::Circulant, CosineParam::Phase] {
            for rectifier in [false, true] {
                let mut cfg = NetConfig::new(problem.clone());
                cfg.kernel = kernel;
                cfg.cosine = cosine;
                cfg.layers = 3;
                cfg.filter_size = 3;
                cfg.rectifier = rectifier;
                out.push(cfg);
            }
        }
    }
    out
}

fn config_label(cfg: &NetConfig) -> String {
    format!(
        "{}/{}/{}",
        if matches!(cfg.kernel, KernelMode::Dense) { "dense" } else { "butterfly" },
        cfg.cosine.name(),
        if cfg.rectifier { "relu" } else { "linear" }
    )
}

/// 8. Analytic gradients against central differences.
pub fn gradient_check() -> CheckOutcome {
    timed(8, "gradients vs differences", || {
        let problem = ProblemConfig::square(16, 0.5)?;
        let samples = gen_dataset(&problem, &DatasetSpec::default(), 2, CHECK_SEED)?;
        let mut worst = 0.0f64;
        let mut worst_at = String::new();
        let mut table = Table { header: ["config", "worst_relative_error"].map(String::from).to_vec(), rows: vec![] };
        let mut tensors = 0;
        for (i, cfg) in gradient_configs(&problem).into_iter().enumerate() {
            let label = config_label(&cfg);
            let net = Network::new(cfg)?;
            let params = probe_params(&net, CHECK_SEED + i as u64)?;
            let errs = finite_difference_check(&net, &params, &samples, 1e-5, 5, CHECK_SEED + i as u64)?;
            tensors += errs.len();
            let (name, e) = errs.iter().fold((String::new(), 0.0f64), |acc, (n, e)| if *e > acc.1 { (n.clone(), *e) } else { acc });
            table.rows.push(vec![i as f64, e]);
            if e > worst {
                worst = e;
                worst_at = format!("{name} in {label}");
            }
        }
        Ok((
            worst <= 1e-4,
            format!("worst relative error {worst:.2e} ({worst_at}) over {tensors} tensors, 8 configs, h = 1e-5 <= 1e-4"),
            Some(table),
        ))
    })
}

/// Random parameters of the dense adjoint stage inside the norm balls:
/// the exact kernel plus a random perturbation, the exact phase diagonal
/// plus a random perturbation, each pulled back into its ball if needed.
fn random_adjoint_params(k0: &Array2<C64>, d0: &[C64], b: &LipschitzBounds, index: u64) -> AdjointParams {
    let mut rng = stream(CHECK_SEED, index, field::PARAMS);
    let size: f64 = rng.random_range(0.0..0.5);
    let g = Array2::from_shape_fn(k0.dim(), |_| normal_c(&mut rng));
    let mut k = k0 + &(g.mapv(|z| z * (size * spectral_norm_c(k0.view()) / spectral_norm_c(g.view()))));
    let kn = spectral_norm_c(k.view());
    if kn > b.kernel[0] {
        k.mapv_inplace(|z| z * (b.kernel[0] / kn));
    }
    let size: f64 = rng.random_range(0.0..0.5);
    let phase = d0
        .iter()
        .map(|&z| {
            let v = z + normal_c(&mut rng) * size;
            if v.norm() > b.phase {
                v * (b.phase / v.norm())
            } else {
                v
            }
        })
        .collect();
    AdjointParams { kernel: AdjointKernel::Dense(k), phase }
}

/// 9. Parameter-Lipschitz inequality of the adjoint stage.
pub fn lipschitz_inequality() -> CheckOutcome {
    timed(9, "Lipschitz inequality", || {
        let cfg = ProblemConfig::square(16, 0.5)?;
        let inputs: Vec<FarField> = (0..4).map(|i| random_far_field(&cfg, 900 + i)).collect::<Result<_>>()?;
        let b_in = inputs.iter().map(|l| frob_c(l.data.view())).fold(0.0, f64::max);
        let k0 = kernel_matrix(&cfg);
        let d0 = diag_phase(cfg.n_theta);
        let bounds = LipschitzBounds { kernel: [1.5 * spectral_norm_c(k0.view()), 0.0, 0.0], phase: 1.5, input: b_in };
        let pairs: Vec<(AdjointParams, AdjointParams)> = (0..20u64)
            .map(|t| (random_adjoint_params(&k0, &d0, &bounds, 920 + 2 * t), random_adjoint_params(&k0, &d0, &bounds, 921 + 2 * t)))
            .collect();
        let report = lipschitz_check(&cfg, &pairs, &inputs, &bounds)?;
        let table = Table {
            header: ["pair", "lhs", "rhs", "kernel_term", "phase_term"].map(String::from).to_vec(),
            rows: report.pairs.iter().enumerate().map(|(i, r)| vec![i as f64, r.lhs, r.rhs, r.kernel_terms[0], r.phase_term]).collect(),
        };
        let worst = report.pairs.iter().map(|r| r.lhs / r.rhs).fold(0.0, f64::max);
        Ok((report.holds, format!("20 pairs, N = 4, n = 16: max lhs/rhs {worst:.3e} <= 1"), Some(table)))
    })
}

/// Steps of the training smoke run.
pub const SMOKE_STEPS: usize = 150;

/// 10. Training smoke run on the smooth dataset, plus a determinism rerun.
pub fn training_smoke() -> CheckOutcome {
    timed(10, "training smoke run", || {
        let problem = ProblemConfig::square(32, 0.5)?;
        let spec = DatasetSpec::default();
        let train_set = gen_dataset(&problem, &spec, 100, CHECK_SEED)?;
        let test_set = gen_dataset(&problem, &spec, 100, CHECK_SEED + 1)?;
        let net = Network::new(NetConfig::new(problem))?;
        let params0 = net.calibrated_phi_params(DEFAULT_IMPULSE_GAIN, &train_set)?;
        let cfg = TrainConfig { steps: SMOKE_STEPS, seed: CHECK_SEED, ..Default::default() };
        let (_, report) = train(&net, &params0, &train_set, &test_set, &cfg)?;
        let short = TrainConfig { steps: 3, ..cfg };
        let (pa, ra) = train(&net, &params0, &train_set, &test_set, &short)?;
        let (pb, rb) = train(&net, &params0, &train_set, &test_set, &short)?;
        let deterministic = ra.same_outcome(&rb)
            && pa.tensors().iter().zip(pb.tensors().iter()).all(|((_, x), (_, y))| x == y)
            && ra.losses.iter().zip(&report.losses).all(|(x, y)| x.to_bits() == y.to_bits());
        let ok = report.e_a <= 0.5 * report.e_a_init && report.e_g <= 0.35 && deterministic;
        let table = Table {
            header: ["step", "batch_loss"].map(String::from).to_vec(),
            rows: report.losses.iter().enumerate().step_by(10).map(|(i, l)| vec![i as f64, *l]).collect(),
        };
        Ok((
            ok,
            format!(
                "{} steps, lr {}: e_a {:.4} -> {:.4} (<= 0.5x), e_g {:.4} (<= 0.35), train {:.0} s, deterministic {}",
                report.steps, cfg.adam.lr, report.e_a_init, report.e_a, report.e_g, report.wall_time, deterministic
            ),
            Some(table),
        ))
    })
}

/// Relative errors of the pseudo-inverse and of the polar pipeline on
/// noiseless data.
pub fn baseline_errors(cfg: &ProblemConfig, pair: &CoefPair) -> Result<(f64, f64)> {
    let lam = BornOperator::new(cfg).far_field(pair)?;
    let rec = Reconstructor::new(cfg, DEFAULT_PAD)?;
    let rel = |x: Array2<f64>| frob((&x - &pair.data).view()) / frob(pair.data.view());
    Ok((rel(rec.reconstruct(&lam)?), rel(rec.reconstruct_polar(&lam)?)))
}

/// 11. Baseline error decreases as alpha decreases.
pub fn baseline_monotone() -> CheckOutcome {
    timed(11, "baseline alpha sweep", || {
        let alphas = [1.0, 0.1, 0.01];
        let mut ok = true;
        let mut table = Table {
            header: ["pair", "alpha", "relative_error", "polar_pipeline_error"].map(String::from).to_vec(),
            rows: vec![],
        };
        let mut parts = Vec::new();
        for t in 0..3u64 {
            let pair = smooth_pair(32, 1100 + t);
            let errs: Vec<(f64, f64)> = alphas
                .iter()
                .map(|&a| baseline_errors(&ProblemConfig::square(32, a)?, &pair))
                .collect::<Result<_>>()?;
            ok &= errs.windows(2).all(|w| w[1].0 < w[0].0);
            for (a, e) in alphas.iter().zip(&errs) {
                table.rows.push(vec![t as f64, *a, e.0, e.1]);
            }
            parts.push(format!("{:.3}/{:.3}/{:.3}", errs[0].0, errs[1].0, errs[2].0));
        }
        Ok((ok, format!("errors at alpha 1/0.1/0.01: {} strictly decreasing", parts.join(", ")), Some(table)))
    })
}
