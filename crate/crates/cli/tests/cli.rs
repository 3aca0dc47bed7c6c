use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rcp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rcp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path, env: &str, algorithm: &str, iterations: usize) -> String {
    let path = dir.join(format!("{env}-{algorithm}.toml"));
    let text = format!(
        r#"[run]
seed = 3
iterations = {iterations}
out_dir = "{out}"
log_every = 1
checkpoint_every = 2

[env]
name = "{env}"
gamma = 0.99
lambda = 0.95

[algorithm]
kind = "{algorithm}"
weighted = true
beta = 1.0
w_max = 20.0

[target]
mode = "soft-max"
temperature = 0.1
std_floor = 0.05

[network]
architecture = "multiply"
hidden_width = 8
embed_width = 4
init_log_std = -0.5
policy_step_size = 0.001
value_step_size = 0.001

[training]
buffer_capacity = 1000
samples_per_iteration = 100
batch_size = 16
value_steps = 3
policy_steps = 3
eval_episodes = 2
diagnostic_episodes = 2
offline_value_warmup = 5
"#,
        out = dir.join("run").display()
    );
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn data_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn train_writes_one_row_per_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "gridworld8x8", "rcp-a", 3);
    let out = rcp(&["train", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    assert_eq!(data_rows(&run.join("metrics.csv")), 3);
    for f in ["config.toml", "timing.csv", "checkpoint.bin", "checkpoint_00002.bin", "diagnostics.csv"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
}

#[test]
fn same_seed_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "pointmass2d", "rcp-r", 2);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let out = rcp(&["train", "--config", &cfg, "--out", d.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    let c = dir.path().join("c");
    rcp(&["train", "--config", &cfg, "--out", c.to_str().unwrap(), "--seed", "4"]);
    assert_ne!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(c.join("metrics.csv")).unwrap());
}

#[test]
fn invalid_config_exits_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[run]\nseed = 1\n\n[env]\nnmae = \"gridworld8x8\"\n").unwrap();
    let out = rcp(&["train", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 5"), "{err}");
}

#[test]
fn missing_keys_only_warn() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("partial.toml");
    let out_dir = dir.path().join("run");
    fs::write(
        &path,
        format!(
            "[run]\niterations = 1\nout_dir = \"{}\"\n\n[training]\nsamples_per_iteration = 50\nbatch_size = 8\nvalue_steps = 1\npolicy_steps = 1\neval_episodes = 1\n\n[network]\nhidden_width = 4\n",
            out_dir.display()
        ),
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_rcp"))
        .args(["train", "--config", path.to_str().unwrap()])
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing [env] gamma"), "{err}");
}

#[test]
fn collect_formats() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "gridworld8x8", "bc", 1);
    let empty = dir.path().join("empty.jsonl");
    let out = rcp(&["collect", "--config", &cfg, "--checkpoint", "random", "--out", empty.to_str().unwrap(), "--transitions", "0"]);
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(&empty).unwrap().lines().count(), 1);

    let data = dir.path().join("random.jsonl");
    let out = rcp(&["collect", "--config", &cfg, "--checkpoint", "random", "--out", data.to_str().unwrap(), "--transitions", "5000"]);
    assert!(out.status.success());
    let text = fs::read_to_string(&data).unwrap();
    let records: Vec<serde_json::Value> = text.lines().skip(1).map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(records.len() >= 5000);
    let mut expected = 0u64;
    for (i, r) in records.iter().enumerate() {
        let id = r["traj"].as_u64().unwrap();
        if i > 0 && r["step"].as_u64() == Some(0) {
            expected += 1;
        }
        assert_eq!(id, expected);
    }

    let bad = dir.path().join("no-such-dir").join("x.jsonl");
    let out = rcp(&["collect", "--config", &cfg, "--checkpoint", "random", "--out", bad.to_str().unwrap(), "--transitions", "10"]);
    assert!(!out.status.success());
}

#[test]
fn offline_rejects_mismatch_and_empty() {
    let dir = tempfile::tempdir().unwrap();
    let grid_cfg = small_config(dir.path(), "gridworld8x8", "rcp-a", 1);
    let pm_cfg = small_config(dir.path(), "pointmass2d", "rcp-a", 1);
    let data = dir.path().join("pm.jsonl");
    let out = rcp(&["collect", "--config", &pm_cfg, "--checkpoint", "scripted-mediocre", "--out", data.to_str().unwrap(), "--transitions", "200"]);
    assert!(out.status.success());

    let out = rcp(&["train-offline", "--config", &grid_cfg, "--dataset", data.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("configuration error"));

    let empty = dir.path().join("empty.jsonl");
    rcp(&["collect", "--config", &pm_cfg, "--checkpoint", "random", "--out", empty.to_str().unwrap(), "--transitions", "0"]);
    let out = rcp(&["train-offline", "--config", &pm_cfg, "--dataset", empty.to_str().unwrap()]);
    assert!(!out.status.success());

    let out = rcp(&["train-offline", "--config", &pm_cfg, "--dataset", data.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(data_rows(&dir.path().join("run").join("metrics.csv")), 1);
}

#[test]
fn eval_and_heatmap_after_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "gridworld8x8", "rcp-r", 2);
    let run = dir.path().join("run");
    let out = rcp(&["export-heatmap", "--out", run.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("diagnostics.csv"));

    assert!(rcp(&["train", "--config", &cfg]).status.success());
    let ck = run.join("checkpoint.bin");
    let out = rcp(&["eval", "--config", &cfg, "--checkpoint", ck.to_str().unwrap(), "--episodes", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("mean_return "));
    assert_eq!(stdout.lines().count(), 4);

    let out = rcp(&["export-heatmap", "--out", run.to_str().unwrap(), "--bins", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(data_rows(&run.join("heatmap.csv")), 5);
    assert!(run.join("heatmap_summary.json").exists());
}
