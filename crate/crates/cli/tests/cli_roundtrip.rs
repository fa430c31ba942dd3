//! End-to-end checks through the compiled binary: config ingestion, run
//! reports, deterministic sweeps and trajectory export.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_secuav"))
}

fn tmpdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("secuav_cli_{tag}_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_cfg(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("scenario.cfg");
    std::fs::write(&path, body).unwrap();
    path
}

const QUICK: &str = "slots = 16\nsubcarriers = 4\nl_max = 2\n";

#[test]
fn validate_reports_secrecy_flag() {
    let dir = tmpdir("validate");
    let cfg = write_cfg(&dir, "");
    let out = bin().arg("validate").arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("128 subcarriers"));
    assert!(text.contains("secrecy guarantee: yes"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn validate_rejects_bad_scenario_with_exit_2() {
    let dir = tmpdir("invalid");
    let cfg = write_cfg(&dir, "p_peak_w = 1e9\n");
    let out = bin().arg("validate").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("peak power"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn missing_config_is_io_failure() {
    let out = bin().arg("validate").arg("/nonexistent/path.cfg").output().unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn env_var_overrides_config_path() {
    let dir = tmpdir("env");
    let good = write_cfg(&dir, "slots = 20\n");
    let out = bin()
        .arg("validate")
        .arg("/nonexistent/path.cfg")
        .env("SECUAV_CONFIG", &good)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("20 slots"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn run_baseline_writes_report_and_exports_trajectory() {
    let dir = tmpdir("run");
    let cfg = write_cfg(&dir, QUICK);
    let out_dir = dir.join("out");
    let out = bin()
        .arg("run")
        .arg(&cfg)
        .args(["--algo", "baseline", "--seed", "9"])
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report_path = out_dir.join("report.json");
    assert!(report_path.exists());
    assert!(out_dir.join("meta.json").exists());

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["algorithm"], "baseline");
    assert!(report["robust_margin"].as_f64().unwrap() >= 0.0);

    let traj = dir.join("traj.csv");
    let out = bin().arg("export-traj").arg(&report_path).arg("--out").arg(&traj).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&traj).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "# schema_version=1");
    assert_eq!(
        lines.next().unwrap(),
        "n,t_x,t_y,v_x,v_y,speed,slot_tx_power_w,min_leakage_margin"
    );
    assert_eq!(lines.count(), 17); // 16 slots + the start row
    assert!(dir.join("traj.sidecar.json").exists());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn runs_are_byte_reproducible_under_fixed_seed() {
    let dir = tmpdir("repro");
    let cfg = write_cfg(&dir, QUICK);
    let mut reports = Vec::new();
    for tag in ["a", "b"] {
        let out_dir = dir.join(tag);
        let out = bin()
            .arg("run")
            .arg(&cfg)
            .args(["--algo", "baseline", "--seed", "1234"])
            .arg("--out")
            .arg(&out_dir)
            .output()
            .unwrap();
        assert!(out.status.success());
        reports.push(std::fs::read(out_dir.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn sweep_emits_sorted_csv() {
    let dir = tmpdir("sweep");
    let cfg = write_cfg(&dir, "slots = 16\nsubcarriers = 2\nl_max = 1\n");
    let out_dir = dir.join("out");
    let out = bin()
        .arg("sweep")
        .arg(&cfg)
        .args(["--radii", "100,400", "--ppeak", "1.0", "--workers", "2"])
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("100,1,proposed,"));
    assert!(rows[1].starts_with("100,1,baseline,"));
    assert!(rows[2].starts_with("400,1,proposed,"));
    assert!(out_dir.join("sweep.json").exists());
    std::fs::remove_dir_all(&dir).ok();
}
