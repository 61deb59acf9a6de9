use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn nmqj(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nmqj")).args(args).env_remove("NMQJ_THREADS").output().unwrap()
}

fn run_in(dir: &Path, cmd: &str, config: &str, extra: &[&str]) -> Output {
    let cfg = configs().join(config);
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap(), "--output", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    nmqj(&args)
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("cfg.json");
    std::fs::write(&path, body).unwrap();
    path
}

const DIMER: &str = r#"{
  "hamiltonian": {"kind": "dimer", "coupling": 50.0, "detuning": 100.0},
  "bath": {"reorganization": LAMBDA, "cutoff": 30.0},
  "temperature": 300.0,
  "initial_state": {"exciton": 2},
  "t_final": 0.2,
  "dt": 0.001
}"#;

#[test]
fn rates_writes_table_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), "rates", "fig1.json", &["--t-final", "0.1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("rates.csv")).unwrap();
    assert!(csv.lines().next().unwrap().starts_with("t_ps,gamma_"));
    assert_eq!(csv.lines().count(), 102);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "rates");
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 1);
}

#[test]
fn bad_config_and_unknown_flag_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &DIMER.replace("LAMBDA", "30.0").replace("\"dt\"", "\"bogus\": 1, \"dt\""));
    let out = nmqj(&["evolve-tcl", "--config", cfg.to_str().unwrap(), "--output", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = nmqj(&["evolve-tcl", "--config", "/nonexistent.json"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run_in(dir.path(), "evolve-tcl", "fig1.json", &["--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run_in(dir.path(), "evolve-tcl", "fig1.json", &["--threads", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn positivity_violation_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &DIMER.replace("LAMBDA", "120.0").replace("0.2", "1.0"));
    let args = ["--config", cfg.to_str().unwrap(), "--output", dir.path().to_str().unwrap()];
    let out = nmqj(&[&["evolve-tcl"], &args[..]].concat());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("evolve_tcl.csv").exists());
    let manifest = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert!(manifest.contains("minimum eigenvalue"));
    let out = nmqj(&[&["evolve-nmqj", "--trajectories", "2000"], &args[..]].concat());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("channel: site"));
}

#[test]
fn single_trajectory_run() {
    // A lone member leaves every other group empty, so any negative rate
    // would be reported as a violation; Markovian rates never go negative.
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &DIMER.replace("LAMBDA", "30.0"));
    let out = nmqj(&[
        "evolve-nmqj", "--config", cfg.to_str().unwrap(), "--output", dir.path().to_str().unwrap(),
        "--trajectories", "1", "--seed", "7", "--jump-log", "--markovian",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("evolve_nmqj.csv")).unwrap();
    assert!(csv.lines().next().unwrap().ends_with("n_groups,jumps_pos,jumps_neg"));
    assert_eq!(csv.lines().count(), 202);
    assert!(dir.path().join("jumps.jsonl").exists());
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let read_all = |threads: &str| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), &DIMER.replace("LAMBDA", "30.0"));
        let out = nmqj(&[
            "evolve-nmqj", "--config", cfg.to_str().unwrap(), "--output", dir.path().to_str().unwrap(),
            "--trajectories", "5000", "--seed", "3", "--jump-log", "--threads", threads,
        ]);
        assert!(out.status.success());
        ["evolve_nmqj.csv", "jumps.jsonl"].map(|f| std::fs::read(dir.path().join(f)).unwrap())
    };
    let reference = read_all("1");
    assert_eq!(reference, read_all("4"));
    assert_eq!(reference, read_all("16"));
}

#[test]
fn scan_reports_measure_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let body = DIMER.replace("LAMBDA", "30.0").replace(
        "\"dt\": 0.001",
        "\"dt\": 0.002, \"measure\": {\"target\": 1, \"tau\": 0.2}, \"scan\": {\"axis\": \"lambda\", \"values\": [10.0, 30.0]}",
    );
    let cfg = write_config(dir.path(), &body);
    let out = nmqj(&["scan", "--config", cfg.to_str().unwrap(), "--output", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("scan_lambda.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}
