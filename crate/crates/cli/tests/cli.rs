use std::path::Path;
use std::process::{Command, Output};

/// Small grids so the whole pipeline runs in seconds.
const SMALL: &[&str] = &[
    "--set",
    "grids.beta.n=11",
    "--set",
    "network.input_width=11",
    "--set",
    "network.hidden_sizes=[8]",
    "--set",
    "dataset.n=30",
    "--set",
    "train.epochs=4",
    "--set",
    "train.patience=2",
    "--seed",
    "3",
];

fn tpa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpa"))
        .current_dir(dir)
        .args(args)
        .args(SMALL)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = tpa(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn has_config_header(path: &Path) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# command = "));
    assert_eq!(lines.next().unwrap(), "# seed = 3");
    assert!(lines.next().unwrap().starts_with("# config = {"));
}

#[test]
fn pipeline_from_dataset_to_prediction() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["trace", "--out", "trace.csv"]);
    has_config_header(&d.join("trace.csv"));
    let trace = std::fs::read_to_string(d.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().filter(|l| !l.starts_with('#')).count(), 12);

    ok(d, &["gen-dataset", "--out", "data.csv"]);
    has_config_header(&d.join("data.csv"));
    ok(d, &["train", "--dataset", "data.csv", "--out", "model.json", "--history", "hist.csv"]);
    let model: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("model.json")).unwrap()).unwrap();
    assert_eq!(model["run_config"]["seed"], 3);
    assert_eq!(model["hidden_sizes"], serde_json::json!([8]));
    ok(d, &["evaluate", "--model", "model.json", "--dataset", "data.csv", "--out", "metrics.csv"]);
    let metrics = std::fs::read_to_string(d.join("metrics.csv")).unwrap();
    assert!(metrics.contains("method,target,rmse,mae,r2"));

    let out = tpa(d, &["predict", "--model", "model.json", "--trace", "trace.csv"]);
    assert!(out.status.success());
    let q: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(q["omega2p_cm1"].as_f64().unwrap().is_finite());

    // Drop one row: 10 values instead of 11.
    let short: String = trace
        .lines()
        .enumerate()
        .filter(|(k, _)| *k != 4)
        .map(|(_, l)| format!("{l}\n"))
        .collect();
    std::fs::write(d.join("short.csv"), short).unwrap();
    let out = tpa(d, &["predict", "--model", "model.json", "--trace", "short.csv"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
}

#[test]
fn fit_and_sweeps_write_their_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["trace", "--out", "trace.csv"]);
    ok(
        d,
        &[
            "fit", "--trace", "trace.csv", "--out", "fit.json", "--histogram", "hist.csv", "--iterations", "it.csv",
            "--set", "fit.n_starts=2", "--set", "fit.maxiter=3",
        ],
    );
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("fit.json")).unwrap()).unwrap();
    assert_eq!(report["results"].as_array().unwrap().len(), 2);
    has_config_header(&d.join("it.csv"));

    ok(d, &["gen-dataset", "--out", "data.csv"]);
    ok(
        d,
        &["sweep-arch", "--dataset", "data.csv", "--out", "sweep.csv", "--set", "sweep.arch_ids=[1,2]", "--set", "sweep.bags=2",
          "--set", "sweep.train.epochs=3", "--set", "sweep.train.patience=1"],
    );
    let sweep = std::fs::read_to_string(d.join("sweep.csv")).unwrap();
    assert!(sweep.contains("arch_id,bias2,variance,total"));
    assert_eq!(sweep.lines().filter(|l| !l.starts_with('#')).count(), 3);
    ok(
        d,
        &["hyper-grid", "--dataset", "data.csv", "--out", "grid.csv", "--set", "hyper_grid.batch_sizes=[8]",
          "--set", "hyper_grid.learning_rates=[0.001]", "--set", "hyper_grid.epochs=3", "--set", "hyper_grid.patience=1"],
    );
    let grid = std::fs::read_to_string(d.join("grid.csv")).unwrap();
    assert!(grid.contains("bs,lr,best_val_mse,best_train_mse\n8,0.001,"));
}

#[test]
fn usage_and_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(tpa(d, &["frobnicate"]).status.code(), Some(2));
    let out = tpa(d, &["trace", "--out", "t.csv", "--set", "molecular.gamma2=-1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("molecular"));
    assert!(!d.join("t.csv").exists());
    let out = tpa(d, &["trace", "--out", "t.csv", "--set", "molecular.gama2=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gama2"));
}
