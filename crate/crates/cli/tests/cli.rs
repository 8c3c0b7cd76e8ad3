use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_audiotext"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen_small(dir: &Path, test_fraction: f64) {
    let spec = dir.join("spec.json");
    std::fs::write(
        &spec,
        format!(
            r#"{{"vocab_size": 50, "speech_dim": 4, "text_dim": 4, "segments": 5, "test_fraction": {test_fraction}}}"#
        ),
    )
    .unwrap();
    let data = dir.join("data");
    let o = run(&[
        "gen-data",
        "--config",
        spec.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("--bogus") && err.contains("Usage"), "{err}");
}

#[test]
fn missing_required_path_names_the_flag() {
    let o = run(&["eval", "--data", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--checkpoint"));
    let o = run(&["gen-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--out"));
}

#[test]
fn help_succeeds() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("grad-check"));
}

#[test]
fn grad_check_passes() {
    let o = run(&["grad-check", "--cases", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 8);
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent");
    let o = run(&["eval", "--data", missing.to_str().unwrap(), "--checkpoint", "nope.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn align_with_zero_steps_emits_the_initial_map() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path(), 0.2);
    let data = dir.path().join("data");
    let map = dir.path().join("map.txt");
    let o = run(&[
        "align",
        "--data",
        data.to_str().unwrap(),
        "--steps",
        "0",
        "--out",
        map.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = audiotext_core::alignment::LinearMap::load(&map).unwrap();
    assert_eq!(m, audiotext_core::alignment::LinearMap::identity(4, 4));
}

#[test]
fn refine_train_and_eval_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path(), 0.2);
    let data = dir.path().join("data");
    let d = data.to_str().unwrap();
    let map = dir.path().join("map.txt");
    let o = run(&["refine", "--data", d, "--out", map.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        r#"{"epochs": 3, "learning_rate": 0.001, "model": {"hidden": 8, "shared_dim": 8}}"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    let o = run(&[
        "train",
        "--data",
        d,
        "--map",
        map.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--epochs",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1, "flag overrides the config file");
    assert!(out.join("best.ckpt").exists() && out.join("last.ckpt").exists());

    let ckpt = out.join("best.ckpt");
    let o = run(&[
        "eval",
        "--data",
        d,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--split",
        "dev",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["score"]["mean"].is_number());
    assert!(stderr(&o).contains("arousal"));
    let again = run(&[
        "eval",
        "--data",
        d,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--split",
        "dev",
    ]);
    assert_eq!(o.stdout, again.stdout, "evaluation is idempotent");

    let o = run(&[
        "train",
        "--resume",
        out.join("last.ckpt").to_str().unwrap(),
        "--epochs",
        "2",
        "--data",
        d,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn evaluating_a_missing_split_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path(), 0.0);
    let data = dir.path().join("data");
    let d = data.to_str().unwrap();
    let out = dir.path().join("run");
    let config = dir.path().join("run.json");
    std::fs::write(&config, r#"{"epochs": 1, "model": {"hidden": 4, "shared_dim": 4}}"#).unwrap();
    let o = run(&[
        "train",
        "--data",
        d,
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&[
        "eval",
        "--data",
        d,
        "--checkpoint",
        out.join("last.ckpt").to_str().unwrap(),
        "--split",
        "test",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("test") && err.to_lowercase().contains("i/o"), "{err}");
}
