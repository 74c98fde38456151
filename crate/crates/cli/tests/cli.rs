//! Black-box tests of the `wqt` binary: flag handling, exit codes, config
//! validation, and smoke runs of every example config.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wqt"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary should spawn")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn schema_flag_prints_config_reference() {
    let out = run(&["--schema"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("experiment"), "schema should describe the experiment tag");
    assert!(text.to_lowercase().contains("exit codes"), "schema should document exit codes");
}

#[test]
fn missing_subcommand_is_usage_error() {
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no subcommand"));
}

#[test]
fn missing_config_file_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&[
        "bohm",
        "--config",
        "/nonexistent/config.json",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());
}

#[test]
fn unknown_config_field_is_rejected_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.json");
    std::fs::write(
        &cfg_path,
        serde_json::json!({
            "experiment": "prepare",
            "model": {"particles": [{"mass": 1.0}], "sites": 4, "spacing": 1.0, "boundary": "periodic"},
            "macrovariable": {"kind": "left-count"},
            "cell": 0,
            "schedule": {"t_start": 0.0, "t_end": 1.0, "steps": 10},
            "no_such_option": true,
        })
        .to_string(),
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&[
        "prepare",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("error:"));
    assert!(!out_dir.exists(), "rejected configs must not create output");
}

#[test]
fn subcommand_must_match_config_tag() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "bohm",
        "--config",
        config("evolve.json").to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("declares experiment 'evolve'"));
}

#[test]
fn every_example_config_runs_clean() {
    let cases = [
        ("evolve", "evolve.json"),
        ("bohm", "bohm.json"),
        ("grw", "grw.json"),
        ("entropy", "entropy.json"),
        ("equiv", "equivalence.json"),
        ("prepare", "prepare.json"),
    ];
    for (subcommand, file) in cases {
        let dir = tempfile::tempdir().unwrap();
        let out_dir = dir.path().join("out");
        let out = run(&[
            subcommand,
            "--config",
            config(file).to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{subcommand} on {file} failed: {}",
            stderr(&out)
        );
        let text = stdout(&out);
        assert!(text.contains("outcome: pass"), "{subcommand} stdout: {text}");
        assert!(out_dir.join("manifest.json").is_file());
        assert!(out_dir.join("report.json").is_file());
    }
}

#[test]
fn corrupted_equivalence_run_exits_one_with_report() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&[
        "equiv",
        "--config",
        config("equivalence_corrupted.json").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("outcome: statistical check failed"));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["outcome"], "stat-fail");
    assert_eq!(report["arm_b_corrupted"], true);
}

#[test]
fn seed_flag_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&[
        "bohm",
        "--config",
        config("bohm_golden.json").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        "9",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 9);
}
