//! Dataset files, CSV tables and graymap images.

use std::fs;
use std::io::Write;
use std::path::Path;

use hsbnet::forward::{CoefPair, DatasetKind, DatasetSample, DatasetSpec, FarField};
use hsbnet::io::{fmt_f64, manifest_path, ArrayContainer, Manifest};
use hsbnet::{Error, ProblemConfig, Result};
use ndarray::{s, Array2, Array3, ArrayView2};

pub fn problem_to_manifest(cfg: &ProblemConfig, m: &mut Manifest) -> Result<()> {
    m.set("omega1", fmt_f64(cfg.omega1))?;
    m.set("omega2", fmt_f64(cfg.omega2))?;
    m.set("n_theta", cfg.n_theta)?;
    m.set("n_c", cfg.n_c)?;
    m.set("alpha", fmt_f64(cfg.alpha))
}

pub fn problem_from_manifest(m: &Manifest) -> Result<ProblemConfig> {
    ProblemConfig::new(
        m.parse_value("omega1")?,
        m.parse_value("omega2")?,
        m.parse_value("n_theta")?,
        m.parse_value("n_c")?,
        m.parse_value("alpha")?,
    )
}

fn kind_letter(k: DatasetKind) -> &'static str {
    match k {
        DatasetKind::Trig => "t",
        _ => "g",
    }
}

/// Write samples as `inputs` (complex, `N x 2n_theta x n_theta`) and
/// `targets` (real, `N x 2n_c x n_c`) plus the sibling manifest.
pub fn write_dataset(path: &Path, cfg: &ProblemConfig, spec: &DatasetSpec, seed: u64, samples: &[DatasetSample]) -> Result<()> {
    let (dr, dc) = cfg.data_shape();
    let (tr, tc) = cfg.coef_shape();
    let n = samples.len();
    let mut inputs = Array3::zeros((n, dr, dc));
    let mut targets = Array3::zeros((n, tr, tc));
    for (k, s) in samples.iter().enumerate() {
        inputs.slice_mut(s![k, .., ..]).assign(&s.input.data);
        targets.slice_mut(s![k, .., ..]).assign(&s.target.data);
    }
    let mut c = ArrayContainer::new();
    c.insert_complex("inputs", &inputs)?;
    c.insert_real("targets", &targets)?;
    c.write(path)?;
    let mut m = Manifest::new();
    problem_to_manifest(cfg, &mut m)?;
    m.set("kind", spec.kind.name())?;
    m.set("kinds", samples.iter().map(|s| kind_letter(s.kind)).collect::<Vec<_>>().join(","))?;
    m.set("count", n)?;
    m.set("seed", seed)?;
    m.set("fine_grid", spec.fine_grid)?;
    m.set("noise", fmt_f64(spec.noise))?;
    m.write(manifest_path(path))
}

pub fn read_dataset(path: &Path) -> Result<(ProblemConfig, Vec<DatasetSample>)> {
    let m = Manifest::read(manifest_path(path))?;
    let cfg = problem_from_manifest(&m)?;
    let seed: u64 = m.parse_value("seed")?;
    let kinds: Vec<DatasetKind> = m
        .require("kinds")?
        .split(',')
        .filter(|k| !k.is_empty())
        .map(|k| match k {
            "g" => Ok(DatasetKind::Gaussian),
            "t" => Ok(DatasetKind::Trig),
            other => Err(Error::Format(format!("unknown sample kind {other:?}"))),
        })
        .collect::<Result<_>>()?;
    let c = ArrayContainer::read(path)?;
    let inputs = c.complex("inputs")?;
    let targets = c.real("targets")?;
    let (dr, dc) = cfg.data_shape();
    let (tr, tc) = cfg.coef_shape();
    let n = kinds.len();
    if inputs.shape() != [n, dr, dc] || targets.shape() != [n, tr, tc] {
        return Err(Error::Format(format!(
            "dataset arrays have shapes {:?} and {:?}, manifest implies {n} samples of {dr}x{dc} and {tr}x{tc}",
            inputs.shape(),
            targets.shape()
        )));
    }
    if n == 0 {
        return Err(Error::Format("dataset has no samples".into()));
    }
    (0..n)
        .map(|k| {
            let input = FarField::new(inputs.slice(s![k, .., ..]).to_owned(), &cfg)?;
            let target = CoefPair::new(targets.slice(s![k, .., ..]).to_owned(), &cfg)?;
            Ok(DatasetSample { input, target, kind: kinds[k], seed, index: k as u64 })
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| (cfg, v))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// CSV with a header row; numbers use 17 significant digits.
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self { text: header.join(",") + "\n" }
    }

    pub fn row(&mut self, cells: &[String]) {
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, &self.text).map_err(|e| io_err(path, e))
    }
}

/// 8-bit binary graymap scaled from `[min, max]` to `[0, 255]`. Returns the
/// range used.
pub fn write_pgm(path: &Path, a: ArrayView2<'_, f64>) -> Result<(f64, f64)> {
    let lo = a.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut bytes = format!("P5\n{} {}\n255\n", a.ncols(), a.nrows()).into_bytes();
    bytes.extend(a.iter().map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 }));
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&bytes).map_err(|e| io_err(path, e))?;
    Ok((lo, hi))
}

/// Per-sample and aggregate relative errors of `preds` against the targets.
pub fn metrics_csv(samples: &[DatasetSample], preds: &[Array2<f64>]) -> (Csv, f64) {
    let mut csv = Csv::new(&["sample", "kind", "error_norm", "target_norm", "relative_error"]);
    let (mut err_sum, mut tgt_sum) = (0.0, 0.0);
    for (s, p) in samples.iter().zip(preds) {
        let err = hsbnet::linalg::frob((p - &s.target.data).view());
        let tgt = hsbnet::linalg::frob(s.target.data.view());
        err_sum += err;
        tgt_sum += tgt;
        let rel = if tgt > 0.0 { err / tgt } else { f64::NAN };
        csv.row(&[s.index.to_string(), s.kind.name().into(), fmt_f64(err), fmt_f64(tgt), fmt_f64(rel)]);
    }
    let agg = if tgt_sum > 0.0 { err_sum / tgt_sum } else { f64::NAN };
    csv.row(&["aggregate".into(), "all".into(), fmt_f64(err_sum), fmt_f64(tgt_sum), fmt_f64(agg)]);
    (csv, agg)
}
