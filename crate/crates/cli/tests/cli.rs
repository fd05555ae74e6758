use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn qcrystal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qcrystal")).args(args).output().expect("binary runs")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("qcrystal-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn stderr_error(out: &Output) -> String {
    assert!(!out.status.success());
    let v: Value = serde_json::from_slice(&out.stderr).expect("json error on stderr");
    v["error"].as_str().unwrap().to_string()
}

#[test]
fn thresholds_light_mass_value() {
    let v = stdout_json(&qcrystal(&["thresholds", "--set", "b=1", "--set", "a=1", "--set", "c=0", "--set", "d=8"]));
    assert_eq!(v["m_star"].as_f64().unwrap(), 0.015625);
    assert_eq!(v["C_G"].as_f64().unwrap(), 1.0);
}

#[test]
fn odd_box_names_the_evenness_rule() {
    let msg = stderr_error(&qcrystal(&["thresholds", "--set", "dims=7"]));
    assert!(msg.contains("even"), "{msg}");
}

#[test]
fn config_errors_carry_the_line() {
    let dir = scratch("badcfg");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("run.cfg");
    std::fs::write(&path, "# comment\nm = 0.5\nJ = nope\n").unwrap();
    let msg = stderr_error(&qcrystal(&["--config", path.to_str().unwrap(), "thresholds"]));
    assert!(msg.contains("line 3"), "{msg}");
}

#[test]
fn config_file_and_overrides() {
    let dir = scratch("cfg");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("run.cfg");
    std::fs::write(&path, "b = 1\na = 1\nc = 0\nd = 8\n").unwrap();
    let v = stdout_json(&qcrystal(&["--config", path.to_str().unwrap(), "thresholds"]));
    assert_eq!(v["m_star"].as_f64().unwrap(), 0.015625);
    let v = stdout_json(&qcrystal(&["--config", path.to_str().unwrap(), "--set", "d=4", "thresholds"]));
    assert_eq!(v["m_star"].as_f64().unwrap(), 64f64.powi(-2));
}

#[test]
fn sample_is_reproducible_and_writes_a_manifest() {
    let args = |dir: &str| {
        vec!["sample", "--samples", "5000", "--seed", "9", "--observable", "phi[0,0,0]*phi[1,0.5,0]", "--out", dir].into_iter().map(String::from).collect::<Vec<_>>()
    };
    let (a, b) = (scratch("repro-a"), scratch("repro-b"));
    let run = |d: &PathBuf| {
        let args = args(d.to_str().unwrap());
        qcrystal(&args.iter().map(String::as_str).collect::<Vec<_>>())
    };
    let (oa, ob) = (run(&a), run(&b));
    assert!(oa.status.success(), "{}", String::from_utf8_lossy(&oa.stderr));
    assert_eq!(oa.stdout, ob.stdout);
    let ra = std::fs::read(a.join("sample.json")).unwrap();
    assert_eq!(ra, std::fs::read(b.join("sample.json")).unwrap());
    let manifest: Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 9);
    assert_eq!(manifest["config"]["params"]["j"], 0.25);
    assert!(manifest["version"].is_string());
    let result: Value = serde_json::from_slice(&ra).unwrap();
    for key in ["mean", "stderr", "n", "ess", "seed"] {
        assert!(!result[key].is_null(), "{key}");
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let base = ["sample", "--samples", "4000", "--seed", "3"];
    let one = qcrystal(&[&base[..], &["--threads", "1"]].concat());
    let two = qcrystal(&[&base[..], &["--threads", "2"]].concat());
    assert!(one.status.success());
    assert_eq!(one.stdout, two.stdout);
}

#[test]
fn covariance_csv_columns() {
    let out = qcrystal(&["covariance", "--dims", "8", "--tau-grid", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "j,tau,G_matsubara,G_closed,abs_diff");
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 32);
    for r in rows.iter().filter(|r| r[1] > 0.0) {
        assert!(r[4] <= 1e-6 * r[3].abs(), "{r:?}");
    }
}

#[test]
fn oracle_csv_is_time_symmetric() {
    let out = qcrystal(&["oracle", "--tau-grid", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let vals: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(vals.len(), 4);
    assert!((vals[1] - vals[3]).abs() < 1e-10);
    assert!(vals[0] > vals[2]);
}

#[test]
fn cluster_static_checks() {
    let v = stdout_json(&qcrystal(&["cluster", "--check", "trees", "--order", "4"]));
    assert_eq!(v["count"], 6);
    let v = stdout_json(&qcrystal(&["cluster", "--check", "bf", "--order", "3"]));
    assert_eq!(v[1]["sum"], "2");
}

#[test]
fn verify_potential_table() {
    let out = qcrystal(&["verify", "potential", "--n-max", "6", "--step", "0.05"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
}

#[test]
fn verify_default_config_passes() {
    let out = qcrystal(&["verify"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert!(!text.contains("FAIL"));
}
