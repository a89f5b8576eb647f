use std::path::Path;
use std::process::{Command, Output};

fn adacare(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adacare"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &[&str] = &[
    "--set",
    "synth.n_patients=120",
    "--set",
    "synth.max_visits=20",
    "--set",
    "model.hidden=8",
    "--set",
    "model.filters=4",
    "--set",
    "train.max_epochs=2",
    "--set",
    "eval.bootstrap=50",
];

fn with_small<'a>(cmd: &'a str) -> Vec<&'a str> {
    let mut v = vec![cmd];
    v.extend_from_slice(SMALL);
    v
}

#[test]
fn synth_train_eval_explain_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["synth", "train", "eval", "explain"] {
        let o = adacare(dir.path(), &with_small(cmd));
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    for f in [
        "records.csv",
        "labels.csv",
        "groups.csv",
        "params.bin",
        "history.jsonl",
        "eval.json",
        "curve.csv",
        "importance_raw.csv",
        "importance_raw.json",
        "importance_conv.csv",
        "importance_conv.json",
    ] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let history = std::fs::read_to_string(dir.path().join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["bootstrap"]["n_resamples"], 50);
    let conv = std::fs::read_to_string(dir.path().join("importance_conv.csv")).unwrap();
    assert_eq!(conv.lines().next().unwrap(), "feature,acute,chronic,control");
    assert_eq!(conv.lines().count(), 4);
}

#[test]
fn explain_without_conv_path_writes_only_raw_importance() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = with_small("synth");
    args.extend(["--set", "model.use_conv=false"]);
    for cmd in ["synth", "train", "explain"] {
        args[0] = cmd;
        let o = adacare(dir.path(), &args);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    assert!(dir.path().join("importance_raw.csv").is_file());
    assert!(!dir.path().join("importance_conv.csv").exists());
}

#[test]
fn gradcheck_on_default_tiny_config_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = adacare(dir.path(), &["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(rep["passed"], true);
    assert_eq!(rep["runs"].as_array().unwrap().len(), 10);
    assert!(rep["max_rel_err"].as_f64().unwrap() < 1e-4);
}

#[test]
fn gradcheck_failure_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    // An impossible tolerance turns any rounding error into a failure.
    let o = adacare(dir.path(), &["gradcheck", "--set", "gradcheck.tolerance=0.0"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn eval_with_missing_params_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = adacare(dir.path(), &with_small("synth"));
    assert!(o.status.success());
    let o = adacare(dir.path(), &["eval", "--set", "params=nowhere/params.bin"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere/params.bin"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cases: &[(&[&str], &str)] = &[
        (&["train", "--set", "train.learning_rate=-1"], "train.learning_rate"),
        (&["train", "--set", "model.dilatons=[1]"], "dilatons"),
        (&["synth", "--set", "synth.prevalence=2"], "synth.prevalence"),
        (&["train", "--threads", "0"], "--threads"),
    ];
    for (args, key) in cases {
        let o = adacare(dir.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).contains(key), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn data_width_mismatch_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = adacare(dir.path(), &with_small("synth"));
    assert!(o.status.success());
    let o = adacare(dir.path(), &["train", "--set", "model.n_features=7"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.n_features"), "{}", stderr(&o));
}

#[test]
fn config_file_and_overrides_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"seed": 5, "synth": {"n_patients": 30, "n_features": 4}}"#).unwrap();
    let o = adacare(dir.path(), &["synth", "--config", cfg.to_str().unwrap(), "--set", "synth.n_patients=12"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let groups = std::fs::read_to_string(dir.path().join("groups.csv")).unwrap();
    assert_eq!(groups.lines().count(), 13);
    let header = std::fs::read_to_string(dir.path().join("records.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap().split(',').count(), 6);
}
