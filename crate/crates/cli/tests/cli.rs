use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sqlossflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sqlossflow"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, json: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, json).unwrap();
    p.to_string_lossy().into_owned()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

const DATA: &str = r#"{"synthetic": {"n_samples": 30, "raw_dim": 4, "kind": "margin_separable",
                                     "gap": 0.2, "seed": 3, "val_fraction": 0.2}}"#;

fn flow_config() -> String {
    format!(
        r#"{{"command": "flow", "dataset": {DATA}, "network": {{"hidden": [6]}},
            "flow": {{"lambda": 0.05, "dt": 0.01, "t_max": 2.0, "rho0": 0.01, "seed": 1, "trace_stride": 20}}}}"#
    )
}

fn train_sweep_config(lr: f64) -> String {
    format!(
        r#"{{"command": "sweep", "dataset": {DATA}, "network": {{"hidden": [5, 5]}},
            "train": {{"lr": {lr}, "momentum": 0.9, "batch_size": 8, "epochs": 5, "weight_decay": 0.01,
                       "normalize": "matrix", "init_frobenius": 1.0, "seed": 0, "trace_stride": 3}},
            "sweep": {{"init_frobenius": [0.5, 2.0], "seed": [1, 2]}}}}"#
    )
}

#[test]
fn flow_run_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "flow.json", &flow_config());
    let out = dir.path().join("out");
    let res = sqlossflow(&["flow", "--config", &cfg, "--output-dir", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let m = manifest(&out);
    assert_eq!(m["command"], "flow");
    assert_eq!(m["config"]["flow"]["lambda"], 0.05);
    let run = &m["runs"][0];
    assert_eq!(run["status"], "ok");
    for key in ["trace", "checkpoint", "report"] {
        assert!(out.join(run[key].as_str().unwrap()).is_file(), "{key}");
    }
    let trace = fs::read_to_string(out.join(run["trace"].as_str().unwrap())).unwrap();
    assert!(trace.starts_with("t,rho,nu,loss"));
    assert!(trace.lines().count() > 2);

    let report: Value =
        serde_json::from_str(&fs::read_to_string(out.join(run["report"].as_str().unwrap())).unwrap()).unwrap();
    assert_eq!(report["effective_lambda"], 0.05);
    assert!(report["summary"]["val_error"].is_number());
}

#[test]
fn output_dir_in_config_is_relative_to_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let json = flow_config().replacen('{', r#"{"output_dir": "results","#, 1);
    let cfg = write_config(dir.path(), "flow.json", &json);
    let res = sqlossflow(&["flow", "--config", &cfg]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(dir.path().join("results/manifest.json").is_file());
}

#[test]
fn diagnose_reads_a_flow_checkpoint_and_rejects_mismatched_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "flow.json", &flow_config());
    let out = dir.path().join("flow");
    assert!(
        sqlossflow(&["flow", "--config", &cfg, "--output-dir", out.to_str().unwrap()])
            .status
            .success()
    );
    let ckpt = out.join(manifest(&out)["runs"][0]["checkpoint"].as_str().unwrap());

    let diag = format!(
        r#"{{"command": "diagnose", "dataset": {DATA}, "diagnose": {{"checkpoint": {:?}}}}}"#,
        ckpt.to_str().unwrap()
    );
    let cfg = write_config(dir.path(), "diag.json", &diag);
    let dout = dir.path().join("diag");
    let res = sqlossflow(&["diagnose", "--config", &cfg, "--output-dir", dout.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let rep: Value = serde_json::from_str(&fs::read_to_string(dout.join("diagnose.json")).unwrap()).unwrap();
    assert_eq!(rep["n_samples"], 24);
    assert_eq!(rep["margins"].as_array().unwrap().len(), 24);
    assert_eq!(rep["probes"].as_array().unwrap().len(), 2);

    let wrong = diag.replace(r#""raw_dim": 4"#, r#""raw_dim": 5"#);
    let cfg = write_config(dir.path(), "wrong.json", &wrong);
    let res = sqlossflow(&["diagnose", "--config", &cfg, "--output-dir", dout.to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("dimensional inputs"));
}

#[test]
fn config_errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "flow.json", &flow_config());
    let res = sqlossflow(&["train", "--config", &cfg, "--output-dir", "unused"]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("not `train`"));

    let typo = flow_config().replace("\"t_max\"", "\"tmax\"");
    let cfg = write_config(dir.path(), "typo.json", &typo);
    let res = sqlossflow(&["flow", "--config", &cfg, "--output-dir", "unused"]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("tmax"));

    let res = sqlossflow(&["flow", "--config", &cfg]);
    assert!(!res.status.success());
}

#[test]
fn parallel_sweep_matches_sequential_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sweep.json", &train_sweep_config(0.01));
    let seq = dir.path().join("seq");
    let par = dir.path().join("par");
    assert!(
        sqlossflow(&["sweep", "--config", &cfg, "--output-dir", seq.to_str().unwrap()])
            .status
            .success()
    );
    assert!(sqlossflow(&[
        "sweep",
        "--config",
        &cfg,
        "--jobs",
        "4",
        "--output-dir",
        par.to_str().unwrap()
    ])
    .status
    .success());
    let runs = manifest(&seq)["runs"].as_array().unwrap().clone();
    assert_eq!(runs.len(), 4);
    assert_eq!(runs, manifest(&par)["runs"].as_array().unwrap().clone());
    for r in &runs {
        let name = r["trace"].as_str().unwrap();
        assert_eq!(fs::read(seq.join(name)).unwrap(), fs::read(par.join(name)).unwrap());
    }
    assert!(seq.join("sweep_report.json").is_file());
}

#[test]
fn failed_sweep_members_still_leave_a_trace_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let json = train_sweep_config(1e6).replace(r#""normalize": "matrix""#, r#""normalize": "none""#);
    let cfg = write_config(dir.path(), "sweep.json", &json);
    let out = dir.path().join("out");
    let res = sqlossflow(&["sweep", "--config", &cfg, "--output-dir", out.to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("runs failed"));
    let m = manifest(&out);
    let runs = m["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 4);
    for r in runs {
        assert!(out.join(r["trace"].as_str().unwrap()).is_file());
        if r["status"] == "failed" {
            assert!(r["error"].as_str().unwrap().contains("aborted"));
        }
    }
    assert!(runs.iter().any(|r| r["status"] == "failed"));
}
