use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mom(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mom"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn report_without_metadata(text: &str) -> Value {
    let mut v: Value = serde_json::from_str(text).expect("report is JSON");
    v.as_object_mut().unwrap().remove("metadata");
    v
}

const TINY_CSV: &str = "x0,y\n1.0,2.1\n2.0,3.9\n3.0,6.2\n";

#[test]
fn fit_on_hand_written_csv_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write(dir.path(), "tiny.csv", TINY_CSV);
    let args = ["fit", "--data", &csv, "--blocks", "3", "--seed", "5"];
    let a = mom(&args);
    let b = mom(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let (ra, rb) = (
        report_without_metadata(&String::from_utf8_lossy(&a.stdout)),
        report_without_metadata(&String::from_utf8_lossy(&b.stdout)),
    );
    assert_eq!(ra, rb);
    let mom_fit = ra["trials"][0]["estimators"]
        .as_array()
        .unwrap()
        .iter()
        .find(|e| e["name"] == "mom")
        .expect("mom estimate present");
    let theta = mom_fit["theta"].as_array().unwrap();
    assert_eq!(theta.len(), 1);
    assert!(theta[0].as_f64().unwrap().is_finite());
    assert_eq!(ra["config"]["mode"], "fit");
    assert_eq!(ra["config"]["seed"], 5);
}

#[test]
fn even_block_count_is_decremented_with_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write(dir.path(), "tiny.csv", TINY_CSV);
    let out = mom(&["fit", "--data", &csv, "--blocks", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = report_without_metadata(&String::from_utf8_lossy(&out.stdout));
    assert_eq!(report["config"]["blocks"], 3);
    assert_eq!(report["warnings"].as_array().unwrap().len(), 1);
}

#[test]
fn non_numeric_cell_is_a_parse_error_naming_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write(dir.path(), "bad.csv", "x0,y\n1.0,2.0\n2.0,oops\n3.0,6.0\n");
    let out = mom(&["fit", "--data", &csv, "--blocks", "3"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("row 3"), "stderr: {stderr}");
    assert!(out.stdout.is_empty());
}

#[test]
fn missing_config_file_fails() {
    let out = mom(&["simulate", "--config", "/nonexistent/config.json"]);
    assert!(!out.status.success());
}

const SIM_CONFIG: &str = r#"{
  "data": {"source": "generate", "samples": 400, "theta_star": [1.0, -0.5],
           "noise": {"kind": "gaussian", "scale": 1.0}},
  "blocks": 21,
  "conditions": {"gamma1": 0.5, "gamma2": 0.05, "r": 1.0, "rho": 1.0},
  "solver": {"step_f": 0.05, "step_g": 0.05, "iterations": 200, "restarts": 1,
             "tolerance": 1e-9, "seed": 0, "audit_every": 10,
             "audit": {"restarts": 1, "iterations": 20, "step": 0.1}},
  "trials": 3,
  "verify": {"condition_probes": 40, "lemma_instances": 60}
}"#;

#[test]
fn simulate_report_files_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "sim.json", SIM_CONFIG);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let csv = dir.path().join(format!("{name}.csv"));
        let status = mom(&[
            "simulate",
            "--config",
            &config,
            "--seed",
            "9",
            "--out",
            out.to_str().unwrap(),
            "--csv-out",
            csv.to_str().unwrap(),
        ]);
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        assert!(status.stdout.is_empty());
        (
            std::fs::read_to_string(out).unwrap(),
            std::fs::read_to_string(csv).unwrap(),
        )
    };
    let (a, csv_a) = run("a.json");
    let (b, csv_b) = run("b.json");
    let (mut ra, mut rb) = (report_without_metadata(&a), report_without_metadata(&b));
    // the output paths differ by construction
    for r in [&mut ra, &mut rb] {
        let config = r["config"].as_object_mut().unwrap();
        config.remove("out");
        config.remove("csv_out");
    }
    assert_eq!(ra, rb);
    assert_eq!(csv_a, csv_b);
    assert_eq!(ra["trials"].as_array().unwrap().len(), 3);
    assert!(csv_a.starts_with("trial,estimator,excess_risk,distance,passed"));
    // flag overrides land in the embedded config
    assert_eq!(ra["config"]["seed"], 9);
    assert_eq!(ra["config"]["mode"], "simulate");
}

#[test]
fn verify_exits_zero_and_flip_hook_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "verify.json", SIM_CONFIG);
    let clean = mom(&["verify", "--config", &config]);
    assert!(clean.status.success(), "{}", String::from_utf8_lossy(&clean.stderr));
    let report = report_without_metadata(&String::from_utf8_lossy(&clean.stdout));
    assert_eq!(report["verification"]["lemma"]["violation_count"], 0);

    let flipped = mom(&["verify", "--config", &config, "--flip-regularizer-sign"]);
    assert_eq!(flipped.status.code(), Some(2));
    let report = report_without_metadata(&String::from_utf8_lossy(&flipped.stdout));
    assert!(report["verification"]["lemma"]["violation_count"].as_u64().unwrap() > 0);
}
