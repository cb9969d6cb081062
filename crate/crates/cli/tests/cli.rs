use std::path::PathBuf;
use std::process::{Command, Output};

fn rangepc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rangepc"))
        .args(args)
        .env_remove("RANGEPC_SEED")
        .output()
        .expect("binary runs")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("rangepc-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn estimate_pc_is_byte_identical_across_runs_and_threads() {
    let args = ["estimate-pc", "--seed", "42", "--r", "2,4,8,16", "--trials", "100", "--g_max", "20", "--levels", "3"];
    let a = rangepc(&[&args[..], &["--threads", "1"]].concat());
    let b = rangepc(&[&args[..], &["--threads", "3"]].concat());
    let c = rangepc(&args);
    assert!(a.status.code().unwrap() <= 1, "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(a.stdout, c.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.starts_with("r,v,p_hat,p_hat_v"));
}

#[test]
fn tanaka_passes_and_reports_residuals() {
    let out = rangepc(&["tanaka", "--r", "2", "--trajectories", "4", "--format", "json", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rec: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rec["passed"], true);
    let rows = rec["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r["relative_residual"].as_f64().unwrap() < 1e-8));
}

#[test]
fn missing_range_is_a_config_error_without_output() {
    let path = scratch("missing.csv");
    let _ = std::fs::remove_file(&path);
    let out = rangepc(&["sir", "--horizon", "5", "--out", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    assert!(!path.exists());
}

#[test]
fn unknown_keys_and_bad_values_are_rejected() {
    assert_eq!(rangepc(&["sir", "--r", "2", "--horizn", "5"]).status.code(), Some(2));
    assert_eq!(rangepc(&["sir", "--r", "two"]).status.code(), Some(2));
    assert_eq!(rangepc(&["sir", "--r", "2", "--format", "xml"]).status.code(), Some(2));
    assert_eq!(rangepc(&["oriented", "--q", "1.5"]).status.code(), Some(2));
    assert_eq!(rangepc(&["nosuch"]).status.code(), Some(2));
}

#[test]
fn flags_override_the_config_file() {
    let cfg = scratch("sir.json");
    std::fs::write(&cfg, r#"{"R": 2, "horizon": 40, "seed": 7}"#).unwrap();
    let from_file = rangepc(&["sir", "--config", cfg.to_str().unwrap(), "--horizon", "3"]);
    assert_eq!(from_file.status.code(), Some(0));
    let direct = rangepc(&["sir", "--r", "2", "--horizon", "3", "--seed", "7"]);
    assert_eq!(from_file.stdout, direct.stdout);
    let text = String::from_utf8(direct.stdout).unwrap();
    assert!(text.lines().count() <= 5);
}

#[test]
fn seed_falls_back_to_environment() {
    let env = Command::new(env!("CARGO_BIN_EXE_rangepc"))
        .args(["brw", "--r", "2", "--generations", "6"])
        .env("RANGEPC_SEED", "11")
        .output()
        .unwrap();
    let flag = rangepc(&["brw", "--r", "2", "--generations", "6", "--seed", "11"]);
    let other = rangepc(&["brw", "--r", "2", "--generations", "6", "--seed", "12"]);
    assert_eq!(env.stdout, flag.stdout);
    assert_ne!(flag.stdout, other.stdout);
}

#[test]
fn failed_check_exits_one_with_output() {
    let out = rangepc(&[
        "scaling", "--r", "2,3,4", "--trials", "100", "--g_max", "5", "--levels", "2", "--gamma_lo", "50", "--gamma_hi", "60",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stdout.is_empty());
}
