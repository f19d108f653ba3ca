use std::fs;
use std::path::Path;
use std::process::Command;

use laughlin_lab::cli::{self, RunConfig, RunManifest};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_laughlin-lab"));
    c.env_remove("LAUGHLIN_LAB_SEED");
    c
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(bin().arg("--help").status().unwrap().code(), Some(0));
    assert_eq!(bin().arg("--version").status().unwrap().code(), Some(0));
}

#[test]
fn bad_arguments_exit_two() {
    assert_eq!(bin().args(["gap", "--bogus"]).status().unwrap().code(), Some(2));
    assert_eq!(bin().args(["gap", "--config", "/nonexistent/config.json"]).status().unwrap().code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["gap", "--n", "0"]).arg("--out-dir").arg(dir.path()).status().unwrap();
    assert_eq!(out.code(), Some(2));
}

#[test]
fn unknown_config_fields_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gap.json");
    fs::write(&cfg, r#"{"n": 3, "typo": 1}"#).unwrap();
    let status = bin().arg("gap").arg("--config").arg(&cfg).arg("--out-dir").arg(dir.path()).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn gap_of_two_bosons_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin().args(["gap", "--n", "2", "--ell", "2"]).arg("--out-dir").arg(dir.path()).status().unwrap();
    assert!(status.success());
    let summary = read_json(&dir.path().join("gap_summary.json"));
    assert!((summary["sigma"].as_f64().unwrap() - 1.0).abs() < 1e-12, "{summary}");
    let manifest = read_json(&dir.path().join(RunManifest::file_name("gap")));
    assert_eq!(manifest["subcommand"], "gap");
    assert!(manifest["outputs"].as_array().unwrap().len() >= 2);
}

#[test]
fn flag_seed_overrides_environment_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("delta.json");
    fs::write(&cfg, r#"{"n": [2], "vectors": 2, "seed": 5}"#).unwrap();
    let run = |extra: &[&str], env: Option<&str>| {
        let mut c = bin();
        c.arg("delta-check").arg("--config").arg(&cfg).arg("--out-dir").arg(dir.path()).args(extra);
        if let Some(s) = env {
            c.env("LAUGHLIN_LAB_SEED", s);
        }
        assert!(c.status().unwrap().success());
        read_json(&dir.path().join(RunManifest::file_name("delta-check")))["seed"].as_u64()
    };
    assert_eq!(run(&[], None), Some(5));
    assert_eq!(run(&[], Some("7")), Some(7));
    assert_eq!(run(&["--seed", "9"], Some("7")), Some(9));
}

#[test]
fn replay_reproduces_a_sampling_run() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["sample-density", "--n", "8", "--ell", "2", "--steps", "400", "--burn-in", "40", "--chains", "2", "--seed", "3"])
        .arg("--out-dir")
        .arg(dir.path().join("a"))
        .status()
        .unwrap();
    assert!(status.success());
    let manifest = dir.path().join("a").join(RunManifest::file_name("sample-density"));
    let replay = bin().arg("replay").arg(&manifest).arg("--out-dir").arg(dir.path().join("b")).status().unwrap();
    assert!(replay.success());
    let a = fs::read(dir.path().join("a/density.csv")).unwrap();
    let b = fs::read(dir.path().join("b/density.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn tampered_output_is_reported_by_replay() {
    let dir = tempfile::tempdir().unwrap();
    let run: RunConfig = serde_json::from_value(serde_json::json!({
        "subcommand": "delta-check",
        "config": {"n": [2, 3], "vectors": 3}
    }))
    .unwrap();
    let first = dir.path().join("first");
    let m = cli::execute(&run, &first).unwrap();
    assert!(m.outputs.iter().all(|o| o.sha256.len() == 64));
    let path = first.join(RunManifest::file_name("delta-check"));
    let mut manifest = read_json(&path);
    manifest["outputs"][0]["sha256"] = Value::String("0".repeat(64));
    fs::write(&path, manifest.to_string()).unwrap();
    let differ = cli::replay(&path, &dir.path().join("second")).unwrap();
    assert_eq!(differ.len(), 1);
    let code = bin().arg("replay").arg(&path).arg("--out-dir").arg(dir.path().join("third")).status().unwrap();
    assert_eq!(code.code(), Some(3));
}

#[test]
fn config_hash_ignores_field_order() {
    let a: RunConfig = serde_json::from_str(r#"{"subcommand": "gap", "config": {"n": 3, "ell": 2}}"#).unwrap();
    let b: RunConfig = serde_json::from_str(r#"{"config": {"ell": 2, "n": 3}, "subcommand": "gap"}"#).unwrap();
    let c: RunConfig = serde_json::from_str(r#"{"subcommand": "gap", "config": {"n": 4, "ell": 2}}"#).unwrap();
    assert_eq!(cli::config_hash(&a).unwrap(), cli::config_hash(&b).unwrap());
    assert_ne!(cli::config_hash(&a).unwrap(), cli::config_hash(&c).unwrap());
}

#[test]
fn screening_of_one_point_is_a_unit_disk() {
    let dir = tempfile::tempdir().unwrap();
    let pts = dir.path().join("pts.json");
    fs::write(&pts, "[[0.0, 0.0]]").unwrap();
    let status = bin()
        .args(["screening", "--h", "0.02"])
        .arg("--points")
        .arg(&pts)
        .arg("--out-dir")
        .arg(dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    let report = read_json(&dir.path().join("screening_report.json"));
    let area = report["area"].as_f64().unwrap();
    assert!((area - 1.0).abs() < 1e-6, "{report}");
}
