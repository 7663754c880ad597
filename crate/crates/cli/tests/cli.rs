use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use codesign::io::formats::{decode_measurement_raw, load_ca, CaFormat};
use codesign::io::load_checkpoint;
use codesign::sensing::{SensingKind, SensingModel};

const CONFIG: &str = r#"{
  "task": {"kind": "reconstruction", "hidden": [12]},
  "sensing": {"kind": "spc", "shots": 6},
  "ca": {"parameterization": "kronecker", "kernel": [3, 3]},
  "regularizers": [{"kind": "binary01", "p1": 1, "p2": 1, "rho0": 1e-3, "rhoT": 1e-1}],
  "noise": {"snr_db": 35},
  "schedule": {"epochs": 6, "batch_size": 8},
  "dataset": {"kind": "synthetic", "rows": 6, "cols": 6, "train": 32, "test": 8},
  "seed": 2
}"#;

fn codesign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_codesign"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn design_into(dir: &Path, name: &str) -> std::path::PathBuf {
    let config = dir.join("config.json");
    fs::write(&config, CONFIG).unwrap();
    let out = dir.join(name);
    let o = codesign(&[
        "--threads",
        "1",
        "design",
        "--config",
        path(&config),
        "--out",
        path(&out),
        "--quiet",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(codesign(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(codesign(&["design"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(
        &bad,
        r#"{"task": "classification", "sensing": {"kind": "spc", "shots": 4}, "colour": 1}"#,
    )
    .unwrap();
    let o = codesign(&["design", "--config", path(&bad), "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
    let missing = codesign(&[
        "export",
        "--checkpoint",
        "/nonexistent.apck",
        "--levels",
        "0,1",
        "--out",
        "x.raw",
    ]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn built_in_gradient_check_passes() {
    let o = codesign(&["gradcheck"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("aperture"));
}

#[test]
fn repeated_designs_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = design_into(dir.path(), "a");
    let b = design_into(dir.path(), "b");
    for file in ["history.csv", "checkpoint.apck", "ca.raw", "metrics.csv"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
    let history = fs::read_to_string(a.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 7);
}

#[test]
fn simulate_without_noise_matches_forward_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = design_into(dir.path(), "run");
    let scene: Vec<f64> = (0..36).map(|i| (i as f64 * 0.37).sin().abs()).collect();
    let scene_path = dir.path().join("scene.csv");
    let text: Vec<String> = scene
        .chunks(6)
        .map(|r| r.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(","))
        .collect();
    fs::write(&scene_path, text.join("\n") + "\n").unwrap();
    let meas = dir.path().join("g.raw");
    let ca_path = out.join("ca.raw");
    let o = codesign(&[
        "simulate",
        "--ca",
        path(&ca_path),
        "--scene",
        path(&scene_path),
        "--snr",
        "none",
        "--out",
        path(&meas),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let got = decode_measurement_raw(&fs::read(&meas).unwrap()).unwrap();
    let ca = load_ca(&ca_path, CaFormat::Raw).unwrap();
    let want = SensingModel::new(SensingKind::Spc, &ca)
        .unwrap()
        .forward(&scene)
        .unwrap();
    assert_eq!(got, want);

    let noisy = dir.path().join("noisy.raw");
    let o = codesign(&[
        "simulate",
        "--ca",
        path(&ca_path),
        "--scene",
        path(&scene_path),
        "--snr",
        "20",
        "--seed",
        "4",
        "--out",
        path(&noisy),
    ]);
    assert!(o.status.success());
    assert_ne!(decode_measurement_raw(&fs::read(&noisy).unwrap()).unwrap(), want);
}

#[test]
fn export_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let out = design_into(dir.path(), "run");
    let ck = out.join("checkpoint.apck");
    let exported = dir.path().join("binary.raw");
    let o = codesign(&[
        "export",
        "--checkpoint",
        path(&ck),
        "--levels",
        "0,1",
        "--out",
        path(&exported),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ca = load_ca(&exported, CaFormat::Raw).unwrap();
    assert!(ca.as_slice().iter().all(|&v| v == 0.0 || v == 1.0));
    assert_eq!(ca.dim(), load_checkpoint(&ck).unwrap().aperture.dim());

    let eval_dir = dir.path().join("eval");
    let dataset = r#"{"kind": "synthetic", "rows": 6, "cols": 6, "train": 32, "test": 8}"#;
    let o = codesign(&[
        "evaluate",
        "--checkpoint",
        path(&ck),
        "--dataset",
        dataset,
        "--out",
        path(&eval_dir),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let written = fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    assert_eq!(written, fs::read_to_string(out.join("metrics.csv")).unwrap());
}
