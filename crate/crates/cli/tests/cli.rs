use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"{
  "task": "pendulum_swingup",
  "total_steps": 1200,
  "eval_every": 1200,
  "eval_episodes": 1,
  "collect_interval": 3,
  "batch_size": 2,
  "seq_len": 4,
  "episode_len": 50,
  "world": {"h_dim": 8, "z_dim": 4, "hidden": 8},
  "proto": {"k": 4, "d": 4},
  "agent": {"hidden": 8, "horizon": 3}
}"#;

fn protocad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protocad"))
        .args(args)
        .env("PROTOCAD_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Train the tiny config and return the output directory.
fn trained(dir: &TempDir, ablation: Option<&str>) -> String {
    let cfg = write(dir.path(), "tiny.json", TINY);
    let out = dir.path().join("run").to_str().unwrap().to_string();
    let mut args = vec!["train", "--config", &cfg, "--seed", "3", "--out", &out];
    if let Some(a) = ablation {
        args.extend(["--ablation", a]);
    }
    let o = protocad(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn train_requires_config() {
    let o = protocad(&["train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--config"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "bad.json", r#"{"task": "pendulum_swingup", "learning_rat": 1}"#);
    let o = protocad(&["train", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));
}

#[test]
fn unknown_task_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "bad.json", r#"{"task": "cartpole"}"#);
    let o = protocad(&["train", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_eval_and_export_round() {
    let dir = TempDir::new().unwrap();
    let out = trained(&dir, Some("plain_swav"));
    let run = Path::new(&out);

    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("resolved-config.json")).unwrap()).unwrap();
    assert_eq!(resolved["ablation"], "plain_swav");
    assert_eq!(resolved["seed"], 3);
    assert_eq!(resolved["world"]["free_nats"], 1.0);

    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let phases: Vec<String> = metrics
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["phase"].as_str().unwrap().to_string())
        .collect();
    assert!(phases.contains(&"eval_test".to_string()), "{phases:?}");
    assert!(run.join("checkpoint/latest.ckpt").exists());
    assert!(fs::read_dir(run.join("episodes")).unwrap().count() >= 3);

    let ckpt = run.join("checkpoint/latest.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let eval_dir = dir.path().join("eval");
    let eval_dir = eval_dir.to_str().unwrap();
    let o = protocad(&["eval", "--checkpoint", ckpt, "--split", "test", "--episodes", "1", "--grid", "--out", eval_dir]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(summary["return_mean"].as_f64().unwrap().is_finite());
    assert!(summary["random_return_mean"].as_f64().unwrap().is_finite());
    let grid = fs::read_to_string(Path::new(eval_dir).join("grid_test.csv")).unwrap();
    let lines: Vec<&str> = grid.lines().collect();
    assert!(lines[0].starts_with("mass_mult,damping_mult,split"));
    assert!(lines.len() > 1);

    let again = protocad(&["eval", "--checkpoint", ckpt, "--split", "test", "--episodes", "1"]);
    let first = protocad(&["eval", "--checkpoint", ckpt, "--split", "test", "--episodes", "1"]);
    assert_eq!(again.stdout, first.stdout);

    let o = protocad(&["export-features", "--checkpoint", ckpt, "--episodes", "1", "--out", eval_dir]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(Path::new(eval_dir).join("features_test.csv")).unwrap();
    assert!(csv.lines().next().unwrap().starts_with("task,mass_mult,damping_mult,step"));
    assert_eq!(csv.lines().count(), 1 + 50);
}

#[test]
fn checkpoint_errors_exit_3() {
    let dir = TempDir::new().unwrap();
    let o = protocad(&["eval", "--checkpoint", dir.path().join("missing.ckpt").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));

    let out = trained(&dir, None);
    let ckpt = Path::new(&out).join("checkpoint/latest.ckpt");
    let other = write(dir.path(), "msd.json", r#"{"task": "msd_reach"}"#);
    let o = protocad(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--config", &other]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("msd_reach"));

    let corrupt = write(dir.path(), "corrupt.ckpt", "not a checkpoint");
    let o = protocad(&["eval", "--checkpoint", &corrupt]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn check_passes() {
    let o = protocad(&["check"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let table = String::from_utf8_lossy(&o.stdout);
    for suite in ["gradients", "sinkhorn_marginals", "lambda_returns", "crossover_loss", "gradient_isolation"] {
        assert!(table.contains(suite));
    }
}
