use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[run]
clients = 4
rounds = 2
seed = 3

[run.data]
users = 3
trajectories = 8
points_per_traj = 40

[run.model]
width = 16

[run.train]
local_steps = 1
batch_size = 16
tpa_steps = 2
tpa_batch = 32
"#;

fn trajfed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trajfed")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn agg_demo_passes() {
    let o = trajfed(&["agg-demo", "--clients", "5", "--len", "37"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("PASS"));
}

#[test]
fn select_demo_json_matches_closed_form() {
    let o = trajfed(&["select-demo", "--trials", "100000", "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let closed: Vec<f64> = v["closed_form"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    // Independent evaluation for r = (0.2, 0.3, 0.5), two ordered draws without replacement.
    let r = [0.2, 0.3, 0.5];
    for (i, &c) in closed.iter().enumerate() {
        let second: f64 = (0..3).filter(|&j| j != i).map(|j| r[j] * r[i] / (1.0 - r[j])).sum();
        assert!((c - (r[i] + second)).abs() < 1e-12);
    }
    assert_eq!(v["pass"], true);
}

#[test]
fn bad_arguments_exit_with_config_code() {
    let o = trajfed(&["select-demo", "--n", "2"]);
    assert_eq!(o.status.code(), Some(1));
    let o = trajfed(&["select-demo", "--nm", "4"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[run]\nclinets = 4\n");
    let o = trajfed(&["--config", &cfg, "gen-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("clinets"));
}

#[test]
fn missing_report_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = trajfed(&["report", "--input", dir.path().join("nope.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_data_writes_csv_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("data");
    let o = trajfed(&["--config", &cfg, "--out", out.to_str().unwrap(), "gen-data"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["train.csv", "test.csv", "train_clean.csv", "test_clean.csv", "dataset.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let loaded = trajfed_core::traj::load_csv(out.join("train.csv")).unwrap();
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("dataset.json")).unwrap()).unwrap();
    assert_eq!(loaded.len() as u64, summary["train_trajectories"].as_u64().unwrap());
}

#[test]
fn train_eval_and_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let o = trajfed(&["--config", &cfg, "--out", out_s, "train", "--json"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["rounds"].as_array().unwrap().len(), 2);
    assert!(report["header"]["generated_at"].is_string());
    for f in ["report.json", "checkpoints/llm.bin", "checkpoints/slm_3.manifest", "checkpoints/tpa_0.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }

    // Evaluating the saved checkpoints reproduces the metrics of the run.
    let o = trajfed(&["--out", out_s, "eval", "--json"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(metrics, report["metrics"]);
    assert!(out.join("eval_report.json").is_file());

    let o = trajfed(&["--out", out_s, "eval", "--tasks", "SPD", "--json"]);
    let only: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(only.as_array().unwrap().len(), 1);
    assert_eq!(only[0]["task"], "SPD");

    let o = trajfed(&["--out", out_s, "eval", "--tasks", "XYZ"]);
    assert_eq!(o.status.code(), Some(1));

    let o = trajfed(&["--out", out_s, "report"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("TSim"));
}
