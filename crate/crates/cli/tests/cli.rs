use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn wpcf(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wpcf"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn unknown_command_is_a_usage_error() {
    let d = TempDir::new().unwrap();
    let o = wpcf(&["frobnicate"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("frobnicate"));
}

#[test]
fn validate_stats_passes_on_the_small_scenario() {
    let d = TempDir::new().unwrap();
    let o = wpcf(&["validate-stats", "--samples", "100000"], d.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let (h, rows) = read_csv(&d.path().join("validate_stats.csv"));
    assert_eq!(h.last().unwrap(), "pass");
    assert_eq!(rows.len(), 15);
    assert!(rows.iter().all(|r| r.last().unwrap() == "true"));
    let m: Vec<f64> = rows.iter().filter(|r| r[1] == "mean_power").map(|r| r[4].parse().unwrap()).collect();
    assert!(m.iter().all(|e| *e < 0.01));
}

#[test]
fn validate_stats_rejects_a_degenerate_sample_count() {
    let d = TempDir::new().unwrap();
    let o = wpcf(&["validate-stats", "--samples", "1"], d.path());
    assert!(!o.status.success());
}

#[test]
fn outputs_are_reproducible_byte_for_byte() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    for d in [&a, &b] {
        let o = wpcf(&["solve-pa", "--trace-solver", "--seed", "7"], d.path());
        assert!(o.status.success());
    }
    let files = manifest(a.path())["files"].as_array().unwrap().clone();
    assert_eq!(files.len(), 4);
    for f in files.iter().map(|f| f.as_str().unwrap()).chain(["manifest.json"]) {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let m = manifest(a.path());
    assert_eq!(m["seed"], 7);
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn solve_pa_ranks_the_schemes() {
    let d = TempDir::new().unwrap();
    assert!(wpcf(&["solve-pa"], d.path()).status.success());
    let (_, rows) = read_csv(&d.path().join("objectives.csv"));
    let obj = |s: &str| rows.iter().find(|r| r[0] == s).unwrap()[1].parse::<f64>().unwrap();
    assert!(obj("opt") >= obj("ccpa") && obj("ccpa") >= obj("epa"));
    let (_, alloc) = read_csv(&d.path().join("allocation.csv"));
    let total: f64 = alloc.iter().map(|r| r[2].parse::<f64>().unwrap()).sum();
    assert!(total <= 10.0 * (1.0 + 1e-9));
}

#[test]
fn simulate_writes_the_trajectory_log() {
    let d = TempDir::new().unwrap();
    let o = wpcf(&["simulate", "--intervals", "10000", "--log-every", "500", "--scheme", "ccpa"], d.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (h, rows) = read_csv(&d.path().join("trajectory.csv"));
    assert_eq!(h, ["interval", "ue", "energy_J", "state", "harvested_J", "consumed_J", "scheme", "target_ue"]);
    assert!(!rows.is_empty());
    for r in &rows {
        let e: f64 = r[2].parse().unwrap();
        assert_eq!(format!("{e:e}"), r[2], "floats are written in round-trip form");
        assert!((0.0..=2e-5).contains(&e));
        assert_eq!(r[6], "ccpa");
    }
    let (_, summary) = read_csv(&d.path().join("summary.csv"));
    assert_eq!(summary.len(), 5);
    let short = TempDir::new().unwrap();
    assert!(wpcf(&["simulate", "--intervals", "100", "--log-every", "0"], short.path()).status.success());
    assert!(!short.path().join("trajectory.csv").exists());
    for r in &summary {
        let p: f64 = r[6..9].iter().map(|x| x.parse::<f64>().unwrap()).sum();
        assert!((p - 1.0).abs() < 1e-12);
    }
}

#[test]
fn empty_config_takes_full_scale_defaults() {
    let d = TempDir::new().unwrap();
    let cfg = d.path().join("cfg.json");
    fs::write(&cfg, "{}").unwrap();
    let o = wpcf(&["complexity", "--config", cfg.to_str().unwrap()], &d.path().join("out"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&d.path().join("out"));
    assert_eq!(m["config"]["num_aps"], 4);
    assert_eq!(m["config"]["antennas_per_ap"], 72);
    assert_eq!(m["config"]["num_ues"], 20);
    assert_eq!(m["config"]["total_power_w"], 10.0);
    let (_, rows) = read_csv(&d.path().join("out/complexity.csv"));
    assert_eq!(rows[0][2], (20 * 16 + 20 * 4).to_string());
    let bound: f64 = rows[0][6].parse().unwrap();
    let observed: f64 = rows[0][7].parse().unwrap();
    assert!(observed <= bound);
}

#[test]
fn bad_configs_name_the_offending_field() {
    let d = TempDir::new().unwrap();
    for (doc, field) in [(r#"{"num_apps": 3}"#, "num_apps"), (r#"{"tau_h": 0.5, "tau_d": 0.5}"#, "tau")] {
        let cfg = d.path().join("cfg.json");
        fs::write(&cfg, doc).unwrap();
        let o = wpcf(&["solve-pa", "--config", cfg.to_str().unwrap()], &d.path().join("out"));
        assert!(!o.status.success());
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(field), "{err}");
    }
}

#[test]
fn transition_table_and_comparison_shapes() {
    let d = TempDir::new().unwrap();
    let o = wpcf(&["transition-table", "--aps", "4,9", "--intervals", "2000"], d.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (_, rows) = read_csv(&d.path().join("transition_table.csv"));
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert_eq!(r[1], "32");
        let p: f64 = r[2..5].iter().map(|x| x.parse::<f64>().unwrap()).sum();
        assert!((p - 1.0).abs() < 1e-12);
    }

    let o = wpcf(&["compare-schemes", "--intervals", "2000"], d.path());
    assert!(o.status.success());
    let (_, rows) = read_csv(&d.path().join("compare_schemes.csv"));
    let names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["fpc", "epa", "ccpa", "opt"]);
    let (h, series) = read_csv(&d.path().join("min_energy.csv"));
    assert_eq!(h.len(), 5);
    assert_eq!(series.len(), 200);
}
