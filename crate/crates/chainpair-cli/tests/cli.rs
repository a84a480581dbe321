//! End-to-end checks of the binary: flag handling, config-file merging,
//! chain export, and the --assert-expected exit-code contract.

use std::path::Path;
use std::process::{Command, Output};

fn chainpair(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chainpair"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(output: &Output) -> serde_json::Value {
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    serde_json::from_slice(&output.stdout).expect("structured report is JSON")
}

#[test]
fn knob_batch_reports_full_success() {
    let out = chainpair(&[
        "--scenario",
        "attack-knob",
        "--seed",
        "1",
        "--runs",
        "3",
        "--format",
        "structured",
    ]);
    let report = stdout_json(&out);
    assert_eq!(report["aggregate"]["success_rate"], 1.0);
    assert_eq!(report["records"].as_array().unwrap().len(), 3);
}

#[test]
fn human_format_is_default() {
    let out = chainpair(&["--scenario", "pair-baseline", "--runs", "1"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("scenario: pair-baseline"));
    assert!(text.contains("success-rate=1"));
}

#[test]
fn unknown_scenario_is_a_usage_error() {
    let out = chainpair(&["--scenario", "attack-everything"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown scenario"));
}

#[test]
fn invalid_config_exits_nonzero() {
    let out = chainpair(&["--scenario", "pair-secured", "--replicas", "2", "--faulty-voters", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("faulty_voters"));
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    std::fs::write(
        &path,
        r#"{"scenario": "attack-pincrack", "runs": 3, "seed": 9, "format": "structured"}"#,
    )
    .unwrap();
    let out = chainpair(&["--config", path.to_str().unwrap(), "--runs", "2"]);
    let report = stdout_json(&out);
    assert_eq!(report["config"]["scenario"], "attack-pincrack");
    assert_eq!(report["config"]["runs"], 2, "flag overrides file");
    assert_eq!(report["config"]["seed"], 9, "file value survives");
}

#[test]
fn assert_expected_passes_for_documented_verdicts() {
    let out = chainpair(&[
        "--scenario",
        "attack-knob-secured",
        "--runs",
        "2",
        "--replicas",
        "3",
        "--assert-expected",
    ]);
    assert!(out.status.success());
}

#[test]
fn assert_expected_fails_when_runs_cannot_complete() {
    // Two faulty voters out of three leave consensus below quorum, so the
    // fixture chain cannot commit and tamper runs fail their verdict.
    let out = chainpair(&[
        "--scenario",
        "tamper-ledger",
        "--replicas",
        "3",
        "--faulty-voters",
        "2",
        "--assert-expected",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("assert-expected"));
}

#[test]
fn export_chain_writes_eleven_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("chain.txt");
    let out = chainpair(&[
        "--scenario",
        "pair-secured",
        "--replicas",
        "3",
        "--export-chain",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 11, "genesis plus ten routed blocks");
    for line in text.lines() {
        assert_eq!(line.split(',').count(), 4);
    }
}

#[test]
fn export_chain_rejected_for_baseline_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("chain.txt");
    let out = chainpair(&[
        "--scenario",
        "pair-baseline",
        "--export-chain",
        path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!Path::new(&path).exists());
}

#[test]
fn repeated_invocations_emit_identical_reports_modulo_timing() {
    let run = || {
        let out = chainpair(&[
            "--scenario",
            "attack-pincrack",
            "--runs",
            "2",
            "--format",
            "structured",
        ]);
        let mut report = stdout_json(&out);
        report["aggregate"]["wall_time_ms"] = 0.into();
        report
    };
    assert_eq!(run(), run());
}
