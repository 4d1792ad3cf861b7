// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dcea_cli::{cmd_verify, RunReport};
use dcea_core::verifier::{AttackId, Verdict};

fn dcea(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcea"))
        .args(args)
        .env_remove("DCEA_SEED")
        .output()
        .expect("binary runs")
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_honest_exits_zero_with_accepted_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let out = dcea(&["run", "--scenario", "honest-s2", "--seed", "3", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: RunReport = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report.verdict.accepted && report.expectation_met);
    assert!(report.bundle_path.exists());
}

#[test]
fn run_frankenstein_config_reports_a2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixtures().join("a2-frankenstein.scenario.json");
    let out = dcea(&["run", "--scenario", path(&cfg), "--seed", "5", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(0));
    let report: RunReport = serde_json::from_slice(&out.stdout).unwrap();
    assert!(!report.verdict.accepted);
    assert!(report.verdict.attack_flags.contains(&AttackId::A2));
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dcea"))
        .args(["run", "--scenario", "a3-s1", "--out", path(dir.path())])
        .env("DCEA_SEED", "42")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let report: RunReport = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report.seed, 42);
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, b"{\"scenario\": \"a1\", \"deployment\": ").unwrap();
    let out = dcea(&["run", "--scenario", path(&cfg), "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.json") && err.contains("byte"), "{err}");

    let out = dcea(&["run", "--scenario", "a9", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let out = dcea(&["run", "--scenario", "a4", "--format", "yaml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn golden_fixtures_verify() {
    let f = fixtures();
    let out = dcea(&[
        "verify",
        path(&f.join("honest-s2.dcea.json")),
        "--policy",
        path(&f.join("honest-s2.policy.json")),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v: Verdict = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v.accepted);

    let out = dcea(&[
        "verify",
        path(&f.join("a5-s2.dcea.json")),
        "--policy",
        path(&f.join("a5-s2.policy.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let v: Verdict = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v.attack_flags, [AttackId::A5].into());
    let stored: Verdict =
        serde_json::from_slice(&std::fs::read(f.join("a5-s2.verdict.json")).unwrap()).unwrap();
    assert_eq!(v, stored);
}

#[test]
fn verify_without_challenge_fails_freshness() {
    let f = fixtures();
    let dir = tempfile::tempdir().unwrap();
    let mut policy: serde_json::Value =
        serde_json::from_slice(&std::fs::read(f.join("honest-s2.policy.json")).unwrap()).unwrap();
    policy.as_object_mut().unwrap().remove("challenge");
    let p = dir.path().join("policy.json");
    std::fs::write(&p, serde_json::to_vec(&policy).unwrap()).unwrap();
    let v = cmd_verify(&f.join("honest-s2.dcea.json"), &p).unwrap();
    assert_eq!(v.failed_checks(), [dcea_core::verifier::CheckId::C4].into());
}

#[test]
fn verify_reports_missing_and_corrupt_files() {
    let f = fixtures();
    let out = dcea(&["verify", "/no/such.dcea.json", "--policy", path(&f.join("honest-s2.policy.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such.dcea.json"));

    let dir = tempfile::tempdir().unwrap();
    let mut bytes = std::fs::read(f.join("honest-s2.dcea.json")).unwrap();
    bytes.truncate(bytes.len() / 2);
    let b = dir.path().join("cut.dcea.json");
    std::fs::write(&b, &bytes).unwrap();
    let out = dcea(&["verify", path(&b), "--policy", path(&f.join("honest-s2.policy.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cut.dcea.json: byte"));
}

#[test]
fn matrix_writes_csv_and_markdown() {
    let dir = tempfile::tempdir().unwrap();
    let out = dcea(&[
        "matrix",
        "--seeds-per-cell",
        "3",
        "--parallel",
        "--format",
        "csv",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("matrix.csv")).unwrap();
    assert_eq!(csv, String::from_utf8(out.stdout).unwrap());
    assert!(csv.contains("a6,S2,detected"));
    assert!(csv.contains("a2-mixmatch,S1,not-applicable"));
    let md = std::fs::read_to_string(dir.path().join("matrix.md")).unwrap();
    assert!(md.contains("| a4 | n/a | detected (3/3) |"), "{md}");
}

#[test]
fn matrix_is_the_same_sequential_or_parallel() {
    let run = |parallel| {
        dcea_cli::cmd_matrix(&dcea_cli::MatrixOptions {
            seeds_per_cell: 4,
            base_seed: 77,
            parallel,
        })
    };
    assert_eq!(run(false), run(true));
}

#[test]
fn list_names_every_scenario() {
    let out = dcea(&["list"]);
    assert_eq!(out.status.code(), Some(0));
    let s = String::from_utf8(out.stdout).unwrap();
    assert!(s.contains("a5-s1:clone_ak\ttargets [C8]"));
    assert!(s.contains("a2-frankenstein-s2:relay\ttargets [C7]"));
}
