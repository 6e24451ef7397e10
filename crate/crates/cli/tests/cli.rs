use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn golden() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/sentiment.json")
}

fn run(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fliplearn"));
    for (key, _) in std::env::vars() {
        if key.starts_with("FLIPLEARN_") {
            cmd.env_remove(key);
        }
    }
    cmd.args(args).envs(env.iter().copied()).output().unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn train(out: &Path, extra: &[&str], env: &[(&str, &str)]) -> PathBuf {
    let tasks = golden().display().to_string();
    let out = out.display().to_string();
    let mut args = vec![
        "train",
        "--tasks",
        &tasks,
        "--out",
        &out,
        "--steps",
        "2",
        "--batch-size",
        "2",
    ];
    args.extend(extra);
    PathBuf::from(stdout(&run(&args, env)).trim())
}

fn config_value(dir: &Path, key: &str) -> String {
    let text = fs::read_to_string(dir.join("config.txt")).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("{key} missing from config.txt"))
        .to_string()
}

#[test]
fn flags_beat_env_beat_file() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("run.cfg");
    fs::write(&file, "# toy run\nseed = 5\nlambda = 1.5\nd_model = 16\n").unwrap();
    let cfg = file.display().to_string();
    let dir = train(
        tmp.path(),
        &["--config", &cfg, "--seed", "7"],
        &[("FLIPLEARN_SEED", "6"), ("FLIPLEARN_LAMBDA", "2")],
    );
    assert_eq!(config_value(&dir, "seed"), "7");
    assert_eq!(config_value(&dir, "lambda"), "2");
    assert_eq!(config_value(&dir, "d_model"), "16");
    assert!(dir.join("checkpoint.json").exists());
    assert_eq!(
        fs::read_to_string(dir.join("train_log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );
}

#[test]
fn unknown_env_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let tasks = golden().display().to_string();
    let dir = tmp.path().display().to_string();
    let out = run(
        &["train", "--tasks", &tasks, "--out", &dir],
        &[("FLIPLEARN_STPES", "3")],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("STPES"));
}

#[test]
fn calibration_is_direct_only() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = train(tmp.path(), &["--mode", "flipped"], &[]);
    let ck = dir.join("checkpoint.json").display().to_string();
    let tasks = golden().display().to_string();
    let out_dir = tmp.path().display().to_string();
    let base = [
        "evaluate",
        "--checkpoint",
        &ck,
        "--tasks",
        &tasks,
        "--out",
        &out_dir,
    ];
    let refused = run(&[&base[..], &["--calibrated"]].concat(), &[]);
    assert!(!refused.status.success());
    let ok = stdout(&run(
        &[&base[..], &["--mode", "direct", "--calibrated"]].concat(),
        &[],
    ));
    let report = PathBuf::from(ok.lines().last().unwrap()).join("sentiment.json");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(report["metadata"]["run_label"], "flipped+ul/direct+cal");
    assert_eq!(report["calibrated"], true);
}

#[test]
fn score_emits_one_record_per_instance_and_template() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = train(tmp.path(), &["--mode", "channel"], &[]);
    let ck = dir.join("checkpoint.json").display().to_string();
    let tasks = golden().display().to_string();
    let text = stdout(&run(
        &["score", "--checkpoint", &ck, "--tasks", &tasks],
        &[],
    ));
    let records: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 4);
    for r in &records {
        assert_eq!(r["mode"], "channel");
        assert_eq!(r["scores"].as_array().unwrap().len(), 2);
    }
}

#[test]
fn bad_manifest_reports_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    let path = bad.display().to_string();
    let out = run(&["render", "--tasks", &path, "--mode", "direct"], &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.json"));
}
