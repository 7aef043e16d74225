use std::path::Path;

use lesionforge_core::dataio::DatasetManifest;
use lesionforge_core::experiment::{run_experiment, ExperimentConfig, Mode, RowRole};

const TINY: &str = r#"
schema_version = 1
seed = 3
mode = "augmented"
t_grid = [0.2, 0.6]
bootstrap_b = 100

[synth]
train = { n_pos = 6, n_neg = 24 }
val = { n_pos = 4, n_neg = 8 }
test = { n_pos = 4, n_neg = 8 }
source = 8
height_range = [40, 48]

[patch]
model_input_side = 8

[translator]
epochs = 1
batch_size = 4

[translator.arch]
side = 8
base_channels = 2
n_down = 1
n_res = 1
disc_channels = 2

[classifier]
max_epochs = 1
batch_size = 8

[classifier.arch]
width = 16
height = 32
channels = 2

[figures]
enabled = false
"#;

fn tiny(mode: Mode) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml_str(TINY).unwrap();
    cfg.mode = mode;
    cfg
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join("reports").join(name)).unwrap()
}

#[test]
fn baseline_mode_reports_a_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&tiny(Mode::Baseline), dir.path()).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].role, RowRole::Baseline);
    assert_eq!(report.test_positives, 4);
    assert_eq!(report.test_negatives, 8);
    assert!(dir.path().join("checkpoints/baseline.json").is_file());
    assert!(!dir.path().join("checkpoints/translator.json").exists());
}

#[test]
fn augmented_run_is_complete_and_repeatable() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    let report = run_experiment(&tiny(Mode::Augmented), &a).unwrap();
    run_experiment(&tiny(Mode::Augmented), &b).unwrap();

    // Baseline, one candidate per t, then the selected row.
    assert_eq!(report.rows.len(), 4);
    let kept: Vec<usize> = report.candidates("Augmented").map(|r| r.augmented_samples).collect();
    assert!(kept[0] >= kept[1]);
    let selected = report.selected("Augmented").unwrap();
    assert!(report.candidates("Augmented").any(|r| r.t == selected.t && r.val_auc == selected.val_auc));

    let generated = DatasetManifest::load(&a.join("manifests/generated.jsonl")).unwrap();
    let source = DatasetManifest::load(&a.join("manifests/source_patches.jsonl")).unwrap();
    assert_eq!(generated.records.len(), source.records.len());
    assert!(kept[0] <= generated.records.len());
    for name in ["report.json", "report.csv", "report.md", "threshold_selection.csv"] {
        assert_eq!(read(&a, name), read(&b, name), "{name} differs between identical runs");
    }
}

#[test]
fn transfer_mode_without_checkpoints_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_experiment(&tiny(Mode::TransferGenerator), dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 1, "{err}");
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 3);
}
