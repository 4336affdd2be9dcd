use std::path::Path;
use std::process::{Command, Output};

fn boxworld(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_boxworld"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        r#"name = "tiny"
seeds = [3]

[env]
room_size = 8
solution_length = [1, 1]
num_distractors = [0, 0]
num_colors = 6

[agent]
heads = 1
head_dim = 8
blocks = 1
mlp_widths = [16, 16, 16, 16]

[trainer]
batch_size = 4
unroll_length = 10
total_env_steps = 400
eval_interval = 200
eval_episodes = 10
log_interval = 1
"#,
    )
    .unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn train_eval_and_check_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();

    let out = boxworld(&["train", "--config", &config, "--out", run_s]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("seed 3: 400 env steps"));

    let again = boxworld(&["train", "--config", &config, "--out", run_s]);
    assert!(!again.status.success(), "non-empty output dir must be refused without --force");

    let ckpt = run.join("params.ckpt");
    let eval = boxworld(&["eval", "--config", &config, "--checkpoint", ckpt.to_str().unwrap(), "--episodes", "5"]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let json: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(json["episodes"], 5);

    let check = boxworld(&["check-csv", run_s]);
    assert!(check.status.success(), "{}", String::from_utf8_lossy(&check.stderr));
}

#[test]
fn generate_writes_requested_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("levels");
    let r = boxworld(&["generate", "--seed", "9", "--count", "3", "--out", out.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let levels = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("level_"))
        .count();
    assert_eq!(levels, 3);
}

#[test]
fn rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[trainer]\nlearning_rat = 1e-4\n").unwrap();
    let r = boxworld(&["random-baseline", "--config", path.to_str().unwrap(), "--episodes", "10"]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("learning_rat"));
}
