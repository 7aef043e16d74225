use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
schema_version = 1
mode = "baseline"
bootstrap_b = 100

[synth]
train = { n_pos = 4, n_neg = 12 }
val = { n_pos = 3, n_neg = 6 }
test = { n_pos = 3, n_neg = 6 }
source = 4
height_range = [40, 48]

[classifier]
max_epochs = 1

[classifier.arch]
width = 16
height = 32
channels = 2
"#;

fn lesionforge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lesionforge"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&lesionforge(dir.path(), &["--help"])), 0);
    assert_eq!(code(&lesionforge(dir.path(), &["no-such-verb"])), 1);
    assert_eq!(code(&lesionforge(dir.path(), &["pseudolabel"])), 1, "missing --t");
}

#[test]
fn bad_config_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "schema_version = 1\nmystery = 4\n").unwrap();
    let out = lesionforge(dir.path(), &["--config", "bad.toml", "synth"]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    let out = lesionforge(dir.path(), &["--config", "missing.toml", "synth"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn missing_inputs_exit_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let out = lesionforge(dir.path(), &["--config", "tiny.toml", "train-classifier"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn stages_chain_through_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let run = |args: &[&str]| {
        let mut full = vec!["--config", "tiny.toml", "--run-dir", "r"];
        full.extend_from_slice(args);
        let out = lesionforge(dir.path(), &full);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["synth"]);
    assert!(dir.path().join("r/manifests/dataset.jsonl").is_file());
    run(&["train-classifier"]);
    assert!(dir.path().join("r/checkpoints/baseline.json").is_file());
    run(&["score", "--checkpoint", "r/checkpoints/baseline.json", "--split", "test", "--out", "r/scores/baseline_test.csv"]);
    run(&["score", "--checkpoint", "r/checkpoints/baseline.json", "--split", "val", "--out", "r/scores/baseline_val.csv"]);
    let scores = std::fs::read_to_string(dir.path().join("r/scores/baseline_test.csv")).unwrap();
    assert_eq!(scores.lines().next(), Some("image_id,label,score"));
    assert_eq!(scores.lines().count(), 1 + 9);
    run(&["evaluate"]);
    assert!(dir.path().join("r/reports/evaluation/report.csv").is_file());
}
