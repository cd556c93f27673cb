use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn fracks(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fracks"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("spawn fracks")
}

fn report(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn constants_reports_closed_forms() {
    let tmp = TempDir::new().unwrap();
    let out = fracks(tmp.path(), &["--s", "1.25", "constants"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout: Value = serde_json::from_slice(&out.stdout).unwrap();
    let c_ds = stdout["c_ds"].as_f64().unwrap();
    let c_hls = stdout["c_hls"].as_f64().unwrap();
    let m_star = stdout["m_star"].as_f64().unwrap();
    assert!((c_ds / 0.12698727186848194 - 1.0).abs() < 1e-12);
    assert!((c_hls / 1.4784148748234220 - 1.0).abs() < 1e-12);
    assert!((m_star / 146.808 - 1.0).abs() < 1e-5);
    let r = report(tmp.path());
    assert_eq!(r["command"], "constants");
    assert_eq!(r["results"], stdout);
    assert_eq!(r["input_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn constants_without_s_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = fracks(tmp.path(), &["constants"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.s"));
}

#[test]
fn invalid_values_name_the_field() {
    let tmp = TempDir::new().unwrap();
    let out = fracks(tmp.path(), &["--s", "2.0", "constants"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.s"));
    let out = fracks(tmp.path(), &["--cfl", "1.5", "--s", "1.25", "constants"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("solver.cfl"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"model": {"s": 1.25, "sigma": 1.0}}"#).unwrap();
    let out = fracks(tmp.path(), &["--config", cfg.to_str().unwrap(), "constants"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sigma"));
}

#[test]
fn empty_dichotomy_gives_empty_table() {
    let tmp = TempDir::new().unwrap();
    let out = fracks(tmp.path(), &["--n", "128", "dichotomy", "--ratios", ""]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(tmp.path());
    assert_eq!(r["results"]["rows"].as_array().unwrap().len(), 0);
}

#[test]
fn dichotomy_separates_sub_and_supercritical() {
    let tmp = TempDir::new().unwrap();
    let args = ["--n", "256", "--blowup-factor", "100", "dichotomy", "--ratios", "0.5,1.5"];
    let out = fracks(tmp.path(), &args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(tmp.path());
    let rows = r["results"]["rows"].as_array().unwrap();
    assert_eq!(rows[0]["status"]["status"], "completed");
    assert_eq!(rows[0]["ge1_within_10_percent"], true);
    assert_eq!(rows[1]["status"]["status"], "blow_up");
    assert_eq!(rows[1]["blowup_within_margin"], true);
    assert!(tmp.path().join("diagnostics_rho0.5.csv").exists());
    assert!(tmp.path().join("diagnostics_rho1.5.csv").exists());
}

#[test]
fn unreachable_blowup_threshold_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let args = ["--n", "128", "--blowup-factor", "1e6", "dichotomy", "--ratios", "1.5"];
    let out = fracks(tmp.path(), &args);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("solver.blowup_factor"));
}

#[test]
fn verify_passes_on_a_sound_setup() {
    let tmp = TempDir::new().unwrap();
    let out = fracks(tmp.path(), &["--n", "256", "verify"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(report(tmp.path())["results"]["failed"], 0);
}

#[test]
fn verify_detects_a_corrupted_kernel() {
    let tmp = TempDir::new().unwrap();
    let out = fracks(tmp.path(), &["--n", "256", "verify", "--corrupt-kernel"]);
    assert_eq!(out.status.code(), Some(2));
    let r = report(tmp.path());
    let symmetry = r["results"]["checks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == "kernel_symmetry")
        .unwrap()
        .clone();
    assert_eq!(symmetry["pass"], false);
}

#[test]
fn verify_fails_with_zero_tolerance() {
    let tmp = TempDir::new().unwrap();
    let out = fracks(tmp.path(), &["--n", "256", "verify", "--tolerance", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn outputs_are_byte_stable() {
    let tmp = TempDir::new().unwrap();
    let args = ["--n", "128", "--t-end", "1e-3", "simulate"];
    let names = ["report.json", "diagnostics_simulate.csv", "profile_simulate.csv"];
    let mut runs = Vec::new();
    for _ in 0..2 {
        let out = fracks(tmp.path(), &args);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        runs.push(names.map(|n| fs::read(tmp.path().join(n)).unwrap()));
    }
    for (i, name) in names.iter().enumerate() {
        assert!(runs[0][i] == runs[1][i], "{name} differs between runs");
    }
}

#[test]
fn extremal_profile_round_trips_through_constants() {
    let tmp = TempDir::new().unwrap();
    let out = fracks(tmp.path(), &["--n", "128", "extremal"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let sidecar: Value =
        serde_json::from_slice(&fs::read(tmp.path().join("profile_extremal.json")).unwrap())
            .unwrap();
    let profile = tmp.path().join("profile_extremal.csv");
    let measured = tmp.path().join("measured");
    let args = ["--s", "1.25", "constants", "--profile", profile.to_str().unwrap()];
    let out = fracks(&measured, &args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout: Value = serde_json::from_slice(&out.stdout).unwrap();
    let j = sidecar["j_value"].as_f64().unwrap();
    let c = stdout["measured"]["c_star_measured"].as_f64().unwrap();
    assert!((c / j - 1.0).abs() < 1e-10, "{c} vs {j}");
    assert_eq!(stdout["measured"]["within_upper_bound"], true);
}

#[test]
fn eps_study_distances_shrink() {
    let tmp = TempDir::new().unwrap();
    let out = fracks(tmp.path(), &["--n", "128", "eps-study"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(tmp.path());
    assert_eq!(r["results"]["strictly_decreasing"], true);
}
