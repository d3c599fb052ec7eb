//! Command-surface behavior: exit codes, fault injection, config
//! rejection, checkpoint plumbing.

use std::path::Path;

use segreg_cli::main_with_args;

fn s(p: &Path) -> String {
    p.to_string_lossy().to_string()
}

#[test]
fn gradcheck_fault_injection_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    let code = main_with_args([
        "segreg",
        "--seed",
        "5",
        "--out",
        &s(&out),
        "gradcheck",
        "--inject-fault",
        "mse_loss",
    ]);
    assert_eq!(code, 3);
    let text = std::fs::read_to_string(out.join("gradcheck.txt")).unwrap();
    assert!(text.contains("mse_loss"));
    assert!(text.contains("FAIL"));
}

#[test]
fn gradcheck_reps_run_independent_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    let code = main_with_args([
        "segreg", "--seed", "5", "--out", &s(&out), "gradcheck", "--reps", "2",
    ]);
    assert_eq!(code, 0);
    let text = std::fs::read_to_string(out.join("gradcheck.txt")).unwrap();
    // Two repetitions of the same 12-check battery.
    assert_eq!(text.lines().count(), 24);
    assert!(text.lines().all(|l| l.contains("PASS")));
}

#[test]
fn unknown_config_keys_are_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[synth]\npears = 3\n").unwrap();
    let code = main_with_args([
        "segreg",
        "--config",
        &s(&cfg),
        "--out",
        &s(&dir.path().join("x")),
        "synth",
    ]);
    assert_eq!(code, 1);
}

#[test]
fn invalid_mode_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let code = main_with_args([
        "segreg",
        "--out",
        &s(&dir.path().join("x")),
        "train",
        "--data",
        &s(dir.path()),
        "--mode",
        "hybrid",
    ]);
    assert_eq!(code, 1);
}

#[test]
fn eval_requires_a_complete_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let code = main_with_args([
        "segreg",
        "--out",
        &s(&dir.path().join("x")),
        "eval",
        "--data",
        &s(dir.path()),
        "--seg",
        "nope.json",
    ]);
    assert_eq!(code, 1); // --seg without --reg
    let code = main_with_args([
        "segreg",
        "--out",
        &s(&dir.path().join("x")),
        "eval",
        "--data",
        &s(dir.path()),
    ]);
    assert_eq!(code, 1); // nothing to evaluate
}
