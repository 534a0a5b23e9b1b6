mod files;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hsbnet::butterfly::LowRankKernelSpec;
use hsbnet::checks::{self, CheckOutcome};
use hsbnet::deconv::{Reconstructor, DEFAULT_PAD};
use hsbnet::forward::{gen_dataset, DatasetKind, DatasetSpec};
use hsbnet::io::fmt_f64;
use hsbnet::train::{
    load_checkpoint, save_checkpoint, train, AdamConfig, CosineParam, Init, KernelMode, NetConfig, Network, TrainConfig,
    DEFAULT_IMPULSE_GAIN, DEFAULT_LAYERS, DEFAULT_FILTER_SIZE,
};
use hsbnet::ProblemConfig;
use rayon::prelude::*;

use files::{metrics_csv, read_dataset, write_dataset, write_pgm, Csv};

/// Exit status of a failed verification suite.
const EXIT_CHECK_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "hsbnet", version, about = "Two-frequency Born inverse scattering: data, checks, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset of far fields and coefficient targets.
    GenData {
        #[arg(long, value_enum, default_value_t = KindArg::Gaussian)]
        kind: KindArg,
        /// Number of samples.
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        n_theta: usize,
        #[arg(long, default_value_t = 32)]
        n_c: usize,
        #[arg(long, default_value_t = 2.5)]
        omega1: f64,
        #[arg(long, default_value_t = 5.0)]
        omega2: f64,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        /// Relative Gaussian noise added to the far field.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Synthesize on a twice finer pixel grid.
        #[arg(long)]
        fine_grid: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run numerical checks and report each against its threshold.
    Verify {
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        /// Directory for the rate tables.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Train the network with Adam and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Held-out set for the generalization error; the training set when omitted.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 0.005)]
        lr: f64,
        #[arg(long, default_value_t = 50)]
        batch: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Uncompressed)]
        mode: ModeArg,
        /// Rank of each block in compressed mode.
        #[arg(long, default_value_t = 4)]
        rank: usize,
        /// Blocks per side in compressed mode.
        #[arg(long, default_value_t = 4)]
        blocks: usize,
        #[arg(long, value_enum, default_value_t = CosineArg::Circulant)]
        cosine: CosineArg,
        #[arg(long, value_enum, default_value_t = InitArg::Calibrated)]
        init: InitArg,
        #[arg(long, default_value_t = DEFAULT_LAYERS)]
        layers: usize,
        #[arg(long, default_value_t = DEFAULT_FILTER_SIZE)]
        filter_size: usize,
        /// Rectifier after every layer but the last.
        #[arg(long)]
        rectifier: bool,
        /// Keep the cosine weights fixed.
        #[arg(long)]
        freeze_cosine: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint path; loss and report tables are written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write six graymap panels per sample.
        #[arg(long)]
        emit_images: bool,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Tikhonov reconstruction of every sample of a dataset.
    Baseline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
        /// Metrics table path.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Gaussian,
    Trig,
    Mixed,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    Rates,
    Adjoint,
    Lowrank,
    Deconv,
    Grad,
    Lipschitz,
    Train,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Uncompressed,
    Compressed,
}

#[derive(Clone, Copy, ValueEnum)]
enum CosineArg {
    Circulant,
    Phase,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    /// Exact adjoint weights and identity-like impulse layers.
    Exact,
    /// As `exact`, with the overall layer gain fitted to the training targets.
    Calibrated,
    /// Seeded Gaussian weights.
    Random,
}

type CmdResult = Result<ExitCode, String>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("HSB_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let result = match cli.command {
        Command::GenData { kind, n, n_theta, n_c, omega1, omega2, alpha, noise, seed, fine_grid, out } => {
            cmd_gen_data(kind, n, ProblemConfig::new(omega1, omega2, n_theta, n_c, alpha), noise, seed, fine_grid, &out)
        }
        Command::Verify { suite, out_dir } => cmd_verify(suite, &out_dir),
        Command::Train {
            data,
            val,
            steps,
            lr,
            batch,
            mode,
            rank,
            blocks,
            cosine,
            init,
            layers,
            filter_size,
            rectifier,
            freeze_cosine,
            seed,
            out,
        } => {
            let kernel = match mode {
                ModeArg::Uncompressed => KernelMode::Dense,
                ModeArg::Compressed => KernelMode::Butterfly(LowRankKernelSpec { r: rank, n_r: blocks }),
            };
            let cosine = match cosine {
                CosineArg::Circulant => CosineParam::Circulant,
                CosineArg::Phase => CosineParam::Phase,
            };
            let shape = NetShape { kernel, cosine, layers, filter_size, rectifier, train_cosine: !freeze_cosine };
            let tc = TrainConfig { adam: AdamConfig { lr, ..Default::default() }, batch, steps, seed };
            cmd_train(&data, val.as_deref(), shape, init, tc, &out)
        }
        Command::Eval { checkpoint, data, emit_images, out_dir } => cmd_eval(&checkpoint, &data, emit_images, &out_dir),
        Command::Baseline { data, alpha, out } => cmd_baseline(&data, alpha, &out),
    };
    match result {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn with_path<T>(path: &Path, r: hsbnet::Result<T>) -> Result<T, String> {
    r.map_err(|e| format!("{}: {e}", path.display()))
}

fn cmd_gen_data(kind: KindArg, n: usize, cfg: hsbnet::Result<ProblemConfig>, noise: f64, seed: u64, fine_grid: bool, out: &Path) -> CmdResult {
    let cfg = cfg.map_err(|e| e.to_string())?;
    let kind = match kind {
        KindArg::Gaussian => DatasetKind::Gaussian,
        KindArg::Trig => DatasetKind::Trig,
        KindArg::Mixed => DatasetKind::Mixed,
    };
    let spec = DatasetSpec { kind, fine_grid, noise, ..Default::default() };
    let samples = gen_dataset(&cfg, &spec, n, seed).map_err(|e| e.to_string())?;
    with_path(out, write_dataset(out, &cfg, &spec, seed, &samples))?;
    println!("wrote {n} {} samples to {}", kind.name(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn suite_checks(suite: Suite) -> Vec<fn() -> CheckOutcome> {
    match suite {
        Suite::Adjoint => vec![checks::adjoint_identity, checks::polar_equals_direct],
        Suite::Rates => vec![checks::angular_rate, checks::residual_layers_rate],
        Suite::Lowrank => vec![checks::low_rank_bound],
        Suite::Deconv => vec![checks::symbol_determinant, checks::tikhonov_round_trip, checks::baseline_monotone],
        Suite::Grad => vec![checks::gradient_check],
        Suite::Lipschitz => vec![checks::lipschitz_inequality],
        Suite::Train => vec![checks::training_smoke],
        Suite::All => vec![
            checks::adjoint_identity,
            checks::polar_equals_direct,
            checks::angular_rate,
            checks::low_rank_bound,
            checks::symbol_determinant,
            checks::tikhonov_round_trip,
            checks::residual_layers_rate,
            checks::gradient_check,
            checks::lipschitz_inequality,
            checks::training_smoke,
            checks::baseline_monotone,
        ],
    }
}

fn cmd_verify(suite: Suite, out_dir: &Path) -> CmdResult {
    let mut all_pass = true;
    for run in suite_checks(suite) {
        let out = run();
        println!("{}", out.line());
        all_pass &= out.pass;
        if let Some(t) = &out.table {
            let file = match out.id {
                3 => Some("rates_angular.csv"),
                7 => Some("rates_layers.csv"),
                _ => None,
            };
            if let Some(file) = file {
                std::fs::create_dir_all(out_dir).map_err(|e| format!("{}: {e}", out_dir.display()))?;
                let header: Vec<&str> = t.header.iter().map(String::as_str).collect();
                let mut csv = Csv::new(&header);
                for row in &t.rows {
                    csv.row(&row.iter().map(|&v| fmt_f64(v)).collect::<Vec<_>>());
                }
                let path = out_dir.join(file);
                with_path(&path, csv.write(&path))?;
                println!("     table written to {}", path.display());
            }
        }
    }
    Ok(if all_pass { ExitCode::SUCCESS } else { ExitCode::from(EXIT_CHECK_FAILED) })
}

struct NetShape {
    kernel: KernelMode,
    cosine: CosineParam,
    layers: usize,
    filter_size: usize,
    rectifier: bool,
    train_cosine: bool,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(suffix);
    os.into()
}

fn cmd_train(data: &Path, val: Option<&Path>, shape: NetShape, init: InitArg, tc: TrainConfig, out: &Path) -> CmdResult {
    let (problem, train_set) = with_path(data, read_dataset(data))?;
    let test_set = match val {
        Some(v) => {
            let (p, s) = with_path(v, read_dataset(v))?;
            if (p.omega1, p.omega2, p.n_theta, p.n_c) != (problem.omega1, problem.omega2, problem.n_theta, problem.n_c) {
                return Err(format!("{}: configuration differs from the training set", v.display()));
            }
            s
        }
        None => train_set.clone(),
    };
    let mut cfg = NetConfig::new(problem);
    cfg.kernel = shape.kernel;
    cfg.cosine = shape.cosine;
    cfg.layers = shape.layers;
    cfg.filter_size = shape.filter_size;
    cfg.rectifier = shape.rectifier;
    cfg.train_cosine = shape.train_cosine;
    let net = Network::new(cfg.clone()).map_err(|e| e.to_string())?;
    let params0 = match init {
        InitArg::Exact => net.init_params(Init::Exact, tc.seed),
        InitArg::Calibrated => net.calibrated_phi_params(DEFAULT_IMPULSE_GAIN, &train_set),
        InitArg::Random => net.init_params(Init::Random, tc.seed),
    }
    .map_err(|e| e.to_string())?;
    let (params, report) = train(&net, &params0, &train_set, &test_set, &tc).map_err(|e| e.to_string())?;
    with_path(out, save_checkpoint(out, &cfg, &params, report.steps))?;

    let mut losses = Csv::new(&["step", "batch_loss"]);
    for (i, l) in report.losses.iter().enumerate() {
        losses.row(&[i.to_string(), fmt_f64(*l)]);
    }
    let loss_path = sibling(out, ".losses.csv");
    with_path(&loss_path, losses.write(&loss_path))?;
    let mut rep = Csv::new(&["steps", "seed", "lr", "batch", "e_a_init", "e_g_init", "e_a", "e_g", "wall_time_s"]);
    rep.row(&[
        report.steps.to_string(),
        report.seed.to_string(),
        fmt_f64(tc.adam.lr),
        tc.batch.to_string(),
        fmt_f64(report.e_a_init),
        fmt_f64(report.e_g_init),
        fmt_f64(report.e_a),
        fmt_f64(report.e_g),
        fmt_f64(report.wall_time),
    ]);
    let rep_path = sibling(out, ".report.csv");
    with_path(&rep_path, rep.write(&rep_path))?;
    println!(
        "trained {} steps: e_a {:.4} -> {:.4}, e_g {:.4} -> {:.4}; checkpoint {}",
        report.steps,
        report.e_a_init,
        report.e_a,
        report.e_g_init,
        report.e_g,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

const PANELS: [&str; 6] = ["gamma_exact", "gamma_nn", "gamma_diff", "eta_exact", "eta_nn", "eta_diff"];

fn cmd_eval(checkpoint: &Path, data: &Path, emit_images: bool, out_dir: &Path) -> CmdResult {
    let (cfg, params, _) = with_path(checkpoint, load_checkpoint(checkpoint))?;
    let (problem, samples) = with_path(data, read_dataset(data))?;
    let p = &cfg.problem;
    if (p.omega1, p.omega2, p.n_theta, p.n_c) != (problem.omega1, problem.omega2, problem.n_theta, problem.n_c) {
        return Err(format!(
            "checkpoint expects n_theta {} n_c {} omegas ({}, {}), data has n_theta {} n_c {} omegas ({}, {})",
            p.n_theta, p.n_c, p.omega1, p.omega2, problem.n_theta, problem.n_c, problem.omega1, problem.omega2
        ));
    }
    let net = Network::new(cfg).map_err(|e| e.to_string())?;
    let preds = samples
        .par_iter()
        .map(|s| net.predict(&params, &s.input).map(|c| c.data))
        .collect::<hsbnet::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    std::fs::create_dir_all(out_dir).map_err(|e| format!("{}: {e}", out_dir.display()))?;
    let (csv, agg) = metrics_csv(&samples, &preds);
    let path = out_dir.join("metrics.csv");
    with_path(&path, csv.write(&path))?;
    if emit_images {
        let n = problem.n_c;
        let mut side = Csv::new(&["file", "sample", "panel", "min", "max"]);
        for (s, pred) in samples.iter().zip(&preds) {
            let t = &s.target.data;
            let rows = [(0, n), (n, 2 * n)];
            for (c, &(r0, r1)) in rows.iter().enumerate() {
                let exact = t.slice(ndarray::s![r0..r1, ..]);
                let nn = pred.slice(ndarray::s![r0..r1, ..]);
                let diff = (&exact - &nn).mapv(f64::abs);
                for (k, panel) in [exact.to_owned(), nn.to_owned(), diff].iter().enumerate() {
                    let name = PANELS[3 * c + k];
                    let file = format!("sample{:04}_{name}.pgm", s.index);
                    let path = out_dir.join(&file);
                    let (lo, hi) = with_path(&path, write_pgm(&path, panel.view()))?;
                    side.row(&[file, s.index.to_string(), name.into(), fmt_f64(lo), fmt_f64(hi)]);
                }
            }
        }
        let path = out_dir.join("images.csv");
        with_path(&path, side.write(&path))?;
    }
    println!("{} samples, aggregate relative error {}", samples.len(), fmt_f64(agg));
    Ok(ExitCode::SUCCESS)
}

fn cmd_baseline(data: &Path, alpha: f64, out: &Path) -> CmdResult {
    let (problem, samples) = with_path(data, read_dataset(data))?;
    let cfg = problem.with_alpha(alpha).map_err(|e| e.to_string())?;
    let rec = Reconstructor::new(&cfg, DEFAULT_PAD).map_err(|e| e.to_string())?;
    let preds = samples
        .par_iter()
        .map(|s| rec.reconstruct(&s.input))
        .collect::<hsbnet::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let (csv, agg) = metrics_csv(&samples, &preds);
    with_path(out, csv.write(out))?;
    println!("alpha {alpha}: {} samples, aggregate relative error {}", samples.len(), fmt_f64(agg));
    Ok(ExitCode::SUCCESS)
}
