use std::path::Path;
use std::process::{Command, Output};

fn hsbnet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsbnet")).args(args).current_dir(dir).env("HSB_THREADS", "1").output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn gen(dir: &Path, name: &str, kind: &str, n: usize, seed: u64) {
    let n = n.to_string();
    let seed = seed.to_string();
    ok(&hsbnet(
        &["gen-data", "--kind", kind, "--n", &n, "--n-theta", "16", "--n-c", "16", "--seed", &seed, "--out", name],
        dir,
    ));
}

fn small_train(dir: &Path, out: &str, lr: &str) {
    ok(&hsbnet(
        &[
            "train", "--data", "tr.hsb", "--val", "te.hsb", "--steps", "4", "--batch", "3", "--layers", "2", "--filter-size", "3",
            "--lr", lr, "--seed", "11", "--out", out,
        ],
        dir,
    ));
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn gen_data_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), "a.hsb", "gaussian", 3, 5);
    gen(d.path(), "b.hsb", "gaussian", 3, 5);
    gen(d.path(), "c.hsb", "gaussian", 3, 6);
    let read = |f: &str| std::fs::read(d.path().join(f)).unwrap();
    assert_eq!(read("a.hsb"), read("b.hsb"));
    assert_ne!(read("a.hsb"), read("c.hsb"));
}

#[test]
fn mixed_data_alternates_kinds() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), "m.hsb", "mixed", 4, 1);
    let manifest = std::fs::read_to_string(d.path().join("m.hsb.manifest")).unwrap();
    assert!(manifest.lines().any(|l| l == "kinds=g,t,g,t"), "{manifest}");
}

#[test]
fn verify_adjoint_passes() {
    let d = tempfile::tempdir().unwrap();
    let out = hsbnet(&["verify", "--suite", "adjoint"], d.path());
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("[PASS]")).count(), 2, "{text}");
}

#[test]
fn unknown_suite_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(hsbnet(&["verify", "--suite", "bogus"], d.path()).status.code(), Some(2));
}

#[test]
fn rate_tables_carry_ratios() {
    let d = tempfile::tempdir().unwrap();
    let out = hsbnet(&["verify", "--suite", "rates", "--out-dir", "tables"], d.path());
    assert!(matches!(out.status.code(), Some(0) | Some(3)));
    for file in ["rates_angular.csv", "rates_layers.csv"] {
        let rows = csv_rows(&d.path().join("tables").join(file));
        assert_eq!(rows[0].last().unwrap(), "ratio");
        assert_eq!(rows.len(), 10);
    }
}

#[test]
fn zero_learning_rate_keeps_the_training_error() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), "tr.hsb", "mixed", 6, 1);
    gen(d.path(), "te.hsb", "gaussian", 3, 2);
    small_train(d.path(), "ck.bin", "0");
    let rows = csv_rows(&d.path().join("ck.bin.report.csv"));
    let col = |name: &str| rows[1][rows[0].iter().position(|h| h == name).unwrap()].parse::<f64>().unwrap();
    assert_eq!(col("e_a"), col("e_a_init"));
    assert_eq!(col("e_g"), col("e_g_init"));
    assert_eq!(csv_rows(&d.path().join("ck.bin.losses.csv")).len(), 5);
}

#[test]
fn training_with_a_fixed_seed_is_reproducible() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), "tr.hsb", "mixed", 6, 1);
    gen(d.path(), "te.hsb", "gaussian", 3, 2);
    small_train(d.path(), "a.bin", "0.005");
    small_train(d.path(), "b.bin", "0.005");
    let read = |f: &str| std::fs::read(d.path().join(f)).unwrap();
    assert_eq!(read("a.bin"), read("b.bin"));
    assert_eq!(read("a.bin.losses.csv"), read("b.bin.losses.csv"));
}

#[test]
fn eval_writes_six_panels_per_sample() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), "tr.hsb", "mixed", 6, 1);
    gen(d.path(), "te.hsb", "gaussian", 3, 2);
    small_train(d.path(), "ck.bin", "0.005");
    ok(&hsbnet(&["eval", "--checkpoint", "ck.bin", "--data", "te.hsb", "--emit-images", "--out-dir", "ev"], d.path()));
    let ev = d.path().join("ev");
    let pgms = std::fs::read_dir(&ev).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm")).count();
    assert_eq!(pgms, 18);
    let header = std::fs::read(ev.join("sample0000_gamma_exact.pgm")).unwrap();
    assert!(header.starts_with(b"P5\n16 16\n255\n"));
    assert_eq!(header.len(), b"P5\n16 16\n255\n".len() + 256);
    assert_eq!(csv_rows(&ev.join("images.csv")).len(), 19);
    let metrics = csv_rows(&ev.join("metrics.csv"));
    assert_eq!(metrics.len(), 5);
    assert_eq!(metrics[4][0], "aggregate");
}

#[test]
fn eval_rejects_missing_or_mismatched_data() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), "tr.hsb", "mixed", 6, 1);
    gen(d.path(), "te.hsb", "gaussian", 3, 2);
    small_train(d.path(), "ck.bin", "0.005");
    assert_eq!(hsbnet(&["eval", "--checkpoint", "ck.bin", "--data", "nope.hsb"], d.path()).status.code(), Some(1));
    ok(&hsbnet(&["gen-data", "--n", "2", "--n-theta", "8", "--n-c", "8", "--out", "small.hsb"], d.path()));
    let out = hsbnet(&["eval", "--checkpoint", "ck.bin", "--data", "small.hsb"], d.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_theta"));
}

#[test]
fn empty_dataset_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    let out = hsbnet(&["gen-data", "--n", "0", "--out", "none.hsb"], d.path());
    assert_eq!(out.status.code(), Some(1));
    gen(d.path(), "empty.hsb", "gaussian", 1, 1);
    // Strip the one sample from both the arrays and the manifest.
    let path = d.path().join("empty.hsb");
    let mut c = hsbnet::io::ArrayContainer::read(&path).unwrap();
    let inputs = c.complex("inputs").unwrap().slice(ndarray::s![0..0, .., ..]).to_owned();
    let targets = c.real("targets").unwrap().slice(ndarray::s![0..0, .., ..]).to_owned();
    c.insert_complex("inputs", &inputs).unwrap();
    c.insert_real("targets", &targets).unwrap();
    c.write(&path).unwrap();
    let mpath = hsbnet::io::manifest_path(&path);
    let mut m = hsbnet::io::Manifest::read(&mpath).unwrap();
    m.set("kinds", "").unwrap();
    m.set("count", 0).unwrap();
    m.write(&mpath).unwrap();
    let out = hsbnet(&["baseline", "--data", "empty.hsb", "--out", "b.csv"], d.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no samples"));
}

#[test]
fn baseline_reconstructs_zero_data_as_zero() {
    let d = tempfile::tempdir().unwrap();
    ok(&hsbnet(&["gen-data", "--kind", "trig", "--n", "2", "--n-theta", "16", "--n-c", "16", "--out", "z.hsb"], d.path()));
    // Overwrite the far fields with zeros while keeping the container layout.
    let path = d.path().join("z.hsb");
    let mut c = hsbnet::io::ArrayContainer::read(&path).unwrap();
    let zeros = c.complex("inputs").unwrap().mapv(|_| hsbnet::C64::new(0.0, 0.0));
    c.insert_complex("inputs", &zeros).unwrap();
    c.write(&path).unwrap();
    ok(&hsbnet(&["baseline", "--data", "z.hsb", "--alpha", "0.1", "--out", "b.csv"], d.path()));
    let rows = csv_rows(&d.path().join("b.csv"));
    let rel = rows[0].iter().position(|h| h == "relative_error").unwrap();
    let err = rows[0].iter().position(|h| h == "error_norm").unwrap();
    let tgt = rows[0].iter().position(|h| h == "target_norm").unwrap();
    for r in &rows[1..] {
        assert_eq!(r[err], r[tgt]);
        assert_eq!(r[rel].parse::<f64>().unwrap(), 1.0);
    }
}
