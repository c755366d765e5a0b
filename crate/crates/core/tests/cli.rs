use std::fs;
use std::path::{Path, PathBuf};

use bspde::cli;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str]) -> i32 {
    cli::run(std::iter::once("bspde").chain(args.iter().copied()))
}

fn run_config(command: &str, name: &str, out: &Path, extra: &[&str]) -> i32 {
    let cfg = config(name);
    let mut args = vec![command, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args)
}

fn summary_field(out: &Path, file: &str, key: &str) -> String {
    let text = fs::read_to_string(out.join(file)).expect("summary written");
    text.lines()
        .find_map(|l| l.strip_prefix(key).map(|v| v.trim().to_string()))
        .unwrap_or_else(|| panic!("{key} missing from {file}:\n{text}"))
}

fn solved_value(name: &str) -> f64 {
    let out = tempfile::tempdir().unwrap();
    assert_eq!(run_config("solve", name, out.path(), &[]), 0);
    summary_field(out.path(), "solve_summary.txt", "J(0, y0):").parse().unwrap()
}

#[test]
fn golden_solve_values() {
    // c min(L T, alpha) with c = 2, L = T = alpha = 1
    assert!((solved_value("deterministic.toml") - 2.0).abs() <= 1e-6);
    // X^2 T / (4 G) with X = 2, T = G = 1
    assert!((solved_value("quadratic.toml") - 1.0).abs() <= 1e-3);
    // wait one step, then consume only in the up state: 0.5 * 3
    assert!((solved_value("binomial.toml") - 1.5).abs() <= 1e-6);
}

#[test]
fn missing_config_exits_with_two() {
    let out = tempfile::tempdir().unwrap();
    assert_eq!(run_config("solve", "does_not_exist.toml", out.path(), &[]), 2);
    assert_eq!(run(&["solve"]), 2);
}

#[test]
fn malformed_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    let text = fs::read_to_string(config("deterministic.toml")).unwrap().replace("seed = 1", "seed = 1\ncolour = \"red\"");
    fs::write(&path, text).unwrap();
    let out = dir.path().join("out");
    assert_eq!(run(&["validate", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]), 2);
}

#[test]
fn oracle_caps_exit_with_three() {
    let out = tempfile::tempdir().unwrap();
    assert_eq!(run_config("compare", "caps_exceeded.toml", out.path(), &[]), 3);
}

#[test]
fn compare_agrees_on_the_deterministic_instance() {
    let out = tempfile::tempdir().unwrap();
    assert_eq!(run_config("compare", "deterministic.toml", out.path(), &[]), 0);
    let mut rows = csv::Reader::from_path(out.path().join("compare.csv")).unwrap();
    let headers = rows.headers().unwrap().clone();
    let diff = headers.iter().position(|h| h == "diff").unwrap();
    let mut count = 0;
    for row in rows.records() {
        let row = row.unwrap();
        assert!(row[diff].parse::<f64>().unwrap().abs() <= 1e-6);
        count += 1;
    }
    assert!(count > 0);
}

#[test]
fn zero_residual_threshold_fails_on_a_stochastic_instance() {
    let out = tempfile::tempdir().unwrap();
    assert_eq!(run_config("residual", "binomial.toml", out.path(), &["--threshold", "0"]), 3);
    assert_eq!(summary_field(out.path(), "residual_summary.txt", "result:"), "FAIL");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.path().join("residual_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["passed"], false);
}

#[test]
fn residual_reuses_a_matching_solve() {
    let out = tempfile::tempdir().unwrap();
    assert_eq!(run_config("solve", "deterministic.toml", out.path(), &[]), 0);
    assert_eq!(run_config("residual", "deterministic.toml", out.path(), &[]), 0);
    assert_eq!(summary_field(out.path(), "residual_summary.txt", "solution:"), "cache");
}

#[test]
fn dual_bounds_the_primal_from_above() {
    let out = tempfile::tempdir().unwrap();
    assert_eq!(run_config("dual", "binomial.toml", out.path(), &[]), 0);
    let upper: f64 = summary_field(out.path(), "dual_summary.txt", "upper_bound:").parse().unwrap();
    let primal: f64 = summary_field(out.path(), "dual_summary.txt", "primal:").parse().unwrap();
    assert!((primal - 1.5).abs() <= 1e-6);
    assert!(upper >= primal - 1e-6);
}

#[test]
fn path_ensembles_support_dual_but_not_solve() {
    let out = tempfile::tempdir().unwrap();
    assert_eq!(run_config("dual", "paths.toml", out.path(), &[]), 0);
    assert_eq!(run_config("solve", "paths.toml", out.path(), &[]), 2);
}

#[test]
fn validate_writes_a_manifest_with_the_seed() {
    let out = tempfile::tempdir().unwrap();
    assert_eq!(run_config("validate", "two_asset.toml", out.path(), &[]), 0);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.path().join("validate_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 4);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}
