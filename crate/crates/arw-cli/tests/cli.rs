//! End-to-end tests of the `arw` binary: exit codes, file formats, config
//! precedence, and replay determinism.

use std::path::Path;
use std::process::{Command, Output};

fn arw() -> Command {
    Command::new(env!("CARGO_BIN_EXE_arw"))
}

fn run(args: &[&str]) -> Output {
    arw().args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn write_b1_single(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("b1-single.json");
    std::fs::write(
        &path,
        r#"{"volume": {"dim": 1, "box": [1]}, "sites": {"(0)": 1}}"#,
    )
    .unwrap();
    path
}

#[test]
fn oracle_reports_four_sevenths() {
    let dir = tempfile::tempdir().unwrap();
    let initial = write_b1_single(dir.path());
    let out = run(&["oracle", "--initial", initial.to_str().unwrap(), "--lambda", "1"]);
    let v = stdout_json(&out);
    let occ = v["result"]["origin_occupied"].as_f64().unwrap();
    assert!((occ - 4.0 / 7.0).abs() < 1e-12, "origin_occupied = {occ}");
    // entries sorted by decreasing probability, exact rationals present
    let entries = v["result"]["entries"].as_array().unwrap();
    assert!(entries.windows(2).all(|w| {
        w[0]["probability"].as_f64().unwrap() >= w[1]["probability"].as_f64().unwrap()
    }));
    assert!(v["result"]["rational"].as_bool().unwrap());
    assert_eq!(v["version"].as_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn q_matches_closed_form() {
    let out = run(&["q", "--dim", "1", "--lambda", "1", "--truncation-n", "300"]);
    let v = stdout_json(&out);
    let q = v["result"]["value"].as_f64().unwrap();
    assert!((q - 0.5773502691896258).abs() < 1e-6, "q = {q}");
    assert!(v["result"]["truncation_error"].as_f64().unwrap() < 1e-8);
}

#[test]
fn green_flags_recurrent_kernel() {
    let out = run(&["green", "--dim", "1", "--truncation-n", "400", "--tail-samples", "0"]);
    let v = stdout_json(&out);
    assert_eq!(v["result"]["green"].as_str().unwrap(), "Divergent");
    assert_eq!(v["result"]["escape_prob"].as_f64().unwrap(), 0.0);
}

#[test]
fn replay_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a.json");
    let out_b = dir.path().join("b.json");
    for out in [&out_a, &out_b] {
        let status = arw()
            .args([
                "rhoc", "--dim", "1", "--lambda", "1", "--n", "10", "--eps", "0.05", "--tol",
                "0.05", "--replicas", "400", "--seed", "11", "--out",
            ])
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = std::fs::read(&out_a).unwrap();
    let b = std::fs::read(&out_b).unwrap();
    assert_eq!(a, b, "replay produced different bytes");
    let v: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(v["command"].as_str().unwrap(), "rhoc");
    assert_eq!(v["root_seed"].as_u64().unwrap(), 11);
    assert!(v["config"]["replicas"].as_u64().unwrap() == 400);
}

#[test]
fn validation_errors_exit_one() {
    // unknown subcommand
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));

    // malformed kernel file
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("kernel.json");
    std::fs::write(&bad, "{\"dim\": 1}").unwrap();
    let out = run(&["green", "--kernel", bad.to_str().unwrap(), "--truncation-n", "10"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("kernel"));

    // missing required parameter
    let out = run(&["q", "--dim", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda"));

    // masscheck precondition: rho must sit strictly below lambda_s
    let out = run(&[
        "masscheck", "--dim", "1", "--lambda", "1", "--rho", "0.6", "--n-list", "5", "--replicas",
        "10",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn budget_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let initial = dir.path().join("fill.json");
    std::fs::write(
        &initial,
        r#"{"volume": {"dim": 1, "box": [6]}, "sites": {"(0)": 5, "(1)": 5, "(-1)": 5}}"#,
    )
    .unwrap();
    let out = run(&[
        "stabilize",
        "--initial",
        initial.to_str().unwrap(),
        "--lambda",
        "0.01",
        "--max-topplings",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("budget"));
}

#[test]
fn config_file_fills_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("lab.json");
    std::fs::write(&cfg, r#"{"q": {"lambda": 1.0, "truncation_n": 100}}"#).unwrap();

    // lambda from config
    let out = arw()
        .args(["--config", cfg.to_str().unwrap(), "q", "--dim", "1"])
        .output()
        .unwrap();
    let v = stdout_json(&out);
    assert_eq!(v["config"]["lambda"].as_f64().unwrap(), 1.0);
    assert_eq!(v["config"]["truncation_n"].as_u64().unwrap(), 100);

    // flag overrides config
    let out = arw()
        .args(["--config", cfg.to_str().unwrap(), "q", "--dim", "1", "--lambda", "2"])
        .output()
        .unwrap();
    let v = stdout_json(&out);
    assert_eq!(v["config"]["lambda"].as_f64().unwrap(), 2.0);
}

#[test]
fn carpet_campaign_writes_jsonl_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("carpet-run");
    let status = arw()
        .args([
            "carpet", "--dim", "1", "--regime", "always-sleep", "--r", "2", "--replicas", "50",
            "--seed", "3", "--out",
        ])
        .arg(&base)
        .status()
        .unwrap();
    assert!(status.success());
    let jsonl = std::fs::read_to_string(base.with_extension("jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 50);
    let first: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    assert_eq!(first["root_seed"].as_u64().unwrap(), 3);
    assert_eq!(first["replica"].as_u64().unwrap(), 0);
    assert!(first["record"]["ch_prime"].as_u64().unwrap() >= 1);

    let csv = std::fs::read_to_string(base.with_extension("csv")).unwrap();
    assert!(csv.starts_with("# version="));
    assert!(csv.contains("r,lambda,ch_prime,end_reason"));
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 51);
}

#[test]
fn curve_csv_uses_17_significant_digits() {
    let out = run(&[
        "curve", "--dim", "1", "--lambda", "1", "--n", "5", "--rho-grid", "0.5", "--replicas",
        "100", "--seed", "1", "--format", "csv",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    let data_line = text.lines().find(|l| l.starts_with("5.0000000000000000e-1")).unwrap();
    assert!(data_line.split(',').count() >= 6);
}

#[test]
fn selftest_quick_passes() {
    let out = run(&["selftest", "--quick"]);
    assert!(
        out.status.success(),
        "selftest failed: {}",
        String::from_utf8_lossy(&out.stdout)
    );
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("abelian-shuffle: ok"));
    assert!(text.contains("oracle-agreement: ok"));
    assert!(text.contains("all checks passed"));
}

#[test]
fn chances_reports_pgf_estimate() {
    let out = run(&[
        "chances", "--dim", "1", "--lambda", "1", "--volume-radius", "1", "--replicas", "20000",
        "--seed", "5",
    ]);
    let v = stdout_json(&out);
    let mean = v["result"]["mean_ch"].as_f64().unwrap();
    assert!((mean - 4.0 / 3.0).abs() < 0.05, "mean Ch {mean}");
    let pgf = v["result"]["pgf_occupation"].as_f64().unwrap();
    assert!((pgf - 4.0 / 7.0).abs() < 0.02, "pgf occupation {pgf}");
}
