use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "synth": {
    "seed": 4,
    "start_time": 1599998400,
    "window_hours": 24,
    "noise": 0.2,
    "background_per_hour": 2,
    "specs": [
      {"kind": "hack", "count": 6},
      {"kind": "exchange", "count": 12},
      {"kind": "merchant", "count": 12}
    ]
  },
  "gbt": {"n_rounds": 20},
  "intention": {"epochs": 3}
}"#;

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_intention-monitor"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(cli(dir.path(), &["run", "--bogus"]).status.code(), Some(1));
    assert_eq!(cli(dir.path(), &["--jobs", "0", "synth"]).status.code(), Some(1));
    assert_eq!(cli(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_config_key_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"segment": {"k_stat": 3}}"#).unwrap();
    let o = cli(dir.path(), &["--config", cfg.to_str().unwrap(), "synth"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("k_stat"), "{}", stderr(&o));
}

#[test]
fn missing_upstream_artifact_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(dir.path(), &["eval"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("run `predict` first"), "{}", stderr(&o));
    let o = cli(dir.path(), &["ingest"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("run `synth` first"), "{}", stderr(&o));
}

#[test]
fn stages_run_one_by_one_and_explain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let c = cfg.to_str().unwrap();
    for stage in ["synth", "ingest", "paths", "features", "select", "segment", "train", "predict", "eval"] {
        let o = cli(dir.path(), &["--config", c, "--jobs", "2", stage]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    for f in [
        "transactions.jsonl",
        "labels.csv",
        "paths/index.csv",
        "features/schema.json",
        "featurespec.json",
        "plan.json",
        "sequences.jsonl",
        "intention_model.bin",
        "intention_model.json",
        "predictions.csv",
        "eval_report.json",
        "eval_report.csv",
        "survival_curves.csv",
        "manifest.json",
    ] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    // Rerunning a stage with unchanged inputs rewrites identical bytes.
    let before = std::fs::read(dir.path().join("predictions.csv")).unwrap();
    assert!(cli(dir.path(), &["--config", c, "predict"]).status.success());
    assert_eq!(before, std::fs::read(dir.path().join("predictions.csv")).unwrap());

    let o = cli(dir.path(), &["--config", c, "explain", "hack0000"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    for needle in ["status sequence: [", "action sequence: [", "status decision paths:", "intention motif: [", "t,status,action,p_malicious,survival"] {
        assert!(text.contains(needle), "missing {needle:?} in\n{text}");
    }
    assert!(dir.path().join("explain/hack0000.txt").is_file());
    let o = cli(dir.path(), &["--config", c, "explain", "hack0000", "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["sequence"]["hours"].as_array().unwrap().len(), 24);

    let o = cli(dir.path(), &["--config", c, "explain", "nobody"]);
    assert_eq!(o.status.code(), Some(2));
}
