//! End-to-end experiment runs for every mode.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::classifier::{train_classifier, Classifier, ClassifierCheckpoint};
use crate::dataio::{write_json, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::metrics::roc_auc;
use crate::pseudolabel::{build_augmented_manifest, partition_by_score, pick_threshold, ThresholdTrial};
use crate::translation::Translator;

use super::config::{ExperimentConfig, Mode};
use super::layout::RunLayout;
use super::report::{evaluate_rows, Report, ReportRow, RowInput, RowProvenance, RowRole, REPORT_FORMAT};
use super::stages::{
    file_sha256, load_translator, save_manifest, score_stage, source_patches_stage, synth_stage, train_translator_stage,
    translate_stage, translator_patches_stage, blend_stage, write_scores_csv, DATASET,
};

/// Row type labels of the result tables.
pub const TYPE_BASELINE: &str = "Baseline";
pub const TYPE_AUGMENTED: &str = "Augmented";
pub const TYPE_TL_G: &str = "TL_G";
pub const TYPE_TL_G_PL: &str = "TL_G + TL_PL";
pub const TYPE_TL_PL: &str = "TL_PL";

/// A trained classifier with its checkpoint and the manifest it learned from.
pub struct TrainedModel {
    pub classifier: Classifier,
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    pub train_manifest_sha256: String,
}

/// Trains a classifier on `manifest`, stores it as `checkpoints/<name>.json`
/// and writes its val and test scores to `scores/<name>_{val,test}.csv`.
pub fn train_and_score(
    layout: &RunLayout,
    manifest: &DatasetManifest,
    manifest_name: &str,
    name: &str,
    cfg: &ExperimentConfig,
) -> Result<(TrainedModel, RowScores)> {
    let manifest_path = save_manifest(layout, manifest_name, manifest)?;
    let clf = train_classifier(manifest, &layout.manifests(), &cfg.classifier, None)?;
    let checkpoint = layout.checkpoint(name);
    clf.to_checkpoint().save(&checkpoint)?;
    let scores = RowScores {
        val: score_stage(&clf, manifest, layout, Some(Split::Val))?,
        test: score_stage(&clf, manifest, layout, Some(Split::Test))?,
    };
    write_scores_csv(&layout.score_file(&format!("{name}_val")), &scores.val)?;
    write_scores_csv(&layout.score_file(&format!("{name}_test")), &scores.test)?;
    let model = TrainedModel {
        classifier: clf,
        checkpoint_sha256: file_sha256(&checkpoint)?,
        checkpoint,
        train_manifest_sha256: file_sha256(&manifest_path)?,
    };
    Ok((model, scores))
}

pub struct RowScores {
    pub val: crate::metrics::ScoredSet,
    pub test: crate::metrics::ScoredSet,
}

/// The scorer used to mine generated images for one row type.
struct Scorer<'a> {
    row_type: &'static str,
    classifier: &'a Classifier,
    id: String,
    sha256: String,
}

fn slug(row_type: &str) -> String {
    row_type.to_lowercase().replace(" + ", "_").replace(' ', "_")
}

fn t_tag(t: f64) -> String {
    format!("t{:03}", (t * 100.0).round() as u32)
}

pub fn load_classifier(path: &Path) -> Result<Classifier> {
    Classifier::from_checkpoint(&ClassifierCheckpoint::load(path)?)
}

/// Runs the configured mode inside `run_dir` and writes the report. Reruns
/// with the same configuration produce byte-identical reports.
pub fn run_experiment(config: &ExperimentConfig, run_dir: &Path) -> Result<Report> {
    config.validate()?;
    let layout = RunLayout::new(run_dir);
    layout.create()?;
    let _lock = layout.lock()?;
    let cfg = config.resolved();
    write_json(&layout.config(), &cfg)?;

    log::info!("synthesizing {} dataset", cfg.body_part());
    let dataset = synth_stage(&cfg.synth, &layout)?;
    let dataset_sha = file_sha256(&layout.manifest(DATASET))?;

    log::info!("training baseline classifier");
    let (baseline, base_scores) = train_and_score(&layout, &dataset, "baseline_train", "baseline", &cfg)?;
    let mut inputs = vec![RowInput {
        row_type: TYPE_BASELINE.into(),
        role: RowRole::Baseline,
        t: 0.0,
        augmented_samples: 0,
        val: base_scores.val,
        test: base_scores.test,
        provenance: RowProvenance {
            classifier_sha256: baseline.checkpoint_sha256.clone(),
            train_manifest_sha256: baseline.train_manifest_sha256.clone(),
            ..Default::default()
        },
    }];
    let mut notes = vec![
        format!("95% intervals: percentile bootstrap over {} test resamples shared by all rows.", cfg.bootstrap_b),
        "Operating points are chosen on validation scores and applied to the test set.".into(),
        "Synthetic benchmark: a directional check of augmentation gains, not a reproduction of clinical results.".into(),
    ];

    if cfg.mode != Mode::Baseline {
        let (translator, translator_sha) = obtain_translator(&cfg, &layout, &dataset, &mut notes)?;
        let generated = generate(&cfg, &layout, &dataset, &translator)?;
        log::info!("{} generated images", generated.records.len());

        let transferred = match (&cfg.transfer.scorer, cfg.mode.uses_transferred_scorer()) {
            (Some(p), true) => Some((load_classifier(p)?, file_sha256(p)?)),
            _ => None,
        };
        let mut scorers = Vec::new();
        let native = |row_type| Scorer {
            row_type,
            classifier: &baseline.classifier,
            id: format!("baseline:{}", cfg.body_part()),
            sha256: baseline.checkpoint_sha256.clone(),
        };
        let foreign = |row_type| {
            let (clf, sha) = transferred.as_ref().expect("transfer scorer loaded");
            Scorer {
                row_type,
                classifier: clf,
                id: format!("baseline:{}", cfg.source_body_part.clone().unwrap_or_default()),
                sha256: sha.clone(),
            }
        };
        match cfg.mode {
            Mode::Baseline => {}
            Mode::Augmented => scorers.push(native(TYPE_AUGMENTED)),
            Mode::TransferGenerator => scorers.push(native(TYPE_TL_G)),
            Mode::TransferGeneratorPlusPseudolabeller => {
                scorers.push(native(TYPE_TL_G));
                scorers.push(foreign(TYPE_TL_G_PL));
            }
            Mode::TransferPseudolabeller => scorers.push(foreign(TYPE_TL_PL)),
        }

        let mut selection = String::from("type,t,augmented_samples,val_auc,selected\n");
        for scorer in &scorers {
            let rows = augment_and_retrain(&cfg, &layout, &dataset, &generated, scorer, &translator_sha)?;
            let trials: Vec<ThresholdTrial> = rows.iter().map(|r| ThresholdTrial { t: r.t, val_auc: roc_auc(&r.val).unwrap_or(f64::NAN) }).collect();
            let chosen = pick_threshold(&trials)?;
            for (r, trial) in rows.iter().zip(&trials) {
                let _ = writeln!(selection, "{},{},{},{},{}", r.row_type, r.t, r.augmented_samples, trial.val_auc, r.t == chosen);
            }
            let selected = rows.iter().find(|r| r.t == chosen).cloned().expect("chosen t is a candidate");
            inputs.extend(rows);
            inputs.push(RowInput { role: RowRole::Selected, ..selected });
        }
        let path = layout.reports().join("threshold_selection.csv");
        std::fs::write(&path, selection).map_err(|e| Error::io(&path, e))?;
    }

    let rows: Vec<ReportRow> = evaluate_rows(&inputs, cfg.bootstrap_b, cfg.bootstrap_seed())?;
    let test = &inputs[0].test;
    let report = Report {
        format: REPORT_FORMAT.into(),
        mode: cfg.mode.as_str().into(),
        seed: cfg.seed,
        body_part: cfg.body_part(),
        source_body_part: cfg.source_body_part.clone(),
        config_sha256: cfg.hash(),
        dataset_manifest_sha256: dataset_sha,
        bootstrap_b: cfg.bootstrap_b,
        bootstrap_seed: cfg.bootstrap_seed(),
        ci_method: "percentile".into(),
        test_positives: test.n_pos(),
        test_negatives: test.n_neg(),
        notes,
        rows,
    };
    report.save(&layout.reports())?;
    if cfg.figures.enabled {
        for w in super::figures::emit_figures(run_dir)? {
            log::warn!("{w}");
        }
    }
    Ok(report)
}

/// Trains a translator on this run's patches, or loads the transferred one.
fn obtain_translator(
    cfg: &ExperimentConfig,
    layout: &RunLayout,
    dataset: &DatasetManifest,
    notes: &mut Vec<String>,
) -> Result<(Translator<f32>, String)> {
    if let (true, Some(path)) = (cfg.mode.uses_transferred_translator(), &cfg.transfer.translator) {
        if !path.exists() {
            return Err(Error::Data(format!("transferred translator checkpoint {} not found", path.display())));
        }
        let (translator, _) = load_translator(path)?;
        let copy = layout.checkpoint("translator");
        std::fs::copy(path, &copy).map_err(|e| Error::io(&copy, e))?;
        notes.push(format!(
            "Generator trained on {} and applied to {}.",
            cfg.source_body_part.as_deref().unwrap_or("another body part"),
            cfg.body_part()
        ));
        return Ok((translator, file_sha256(&copy)?));
    }
    let s = cfg.patch.s;
    log::info!("cropping translator patches (s = {s})");
    let patches = translator_patches_stage(dataset, layout, &cfg.patch, s)?;
    for w in &patches.warnings {
        log::warn!("{w}");
    }
    log::info!("training translator on {} patches", patches.translator.records.len());
    let (translator, path) = train_translator_stage(&patches.translator, layout, &cfg.translator, s)?;
    Ok((translator, file_sha256(&path)?))
}

/// Scale factor for generation crops: a transferred translator brings its own
/// unless the configuration sets one.
pub fn generation_scale(cfg: &ExperimentConfig, translator_ck_scale: Option<f64>) -> u32 {
    match (cfg.mode.uses_transferred_translator(), cfg.patch_s_explicit, translator_ck_scale) {
        (true, false, Some(s)) => s.round() as u32,
        _ => cfg.patch.s,
    }
}

/// Source crops → translation → blending into full images.
fn generate(
    cfg: &ExperimentConfig,
    layout: &RunLayout,
    dataset: &DatasetManifest,
    translator: &Translator<f32>,
) -> Result<DatasetManifest> {
    let ck_scale = match (&cfg.transfer.translator, cfg.mode.uses_transferred_translator()) {
        (Some(p), true) => crate::translation::TranslatorCheckpoint::load(p)?.scale_factor,
        _ => None,
    };
    let s = generation_scale(cfg, ck_scale);
    let mut patch_cfg = cfg.patch.clone();
    patch_cfg.model_input_side = translator.arch().side;
    log::info!("cropping source patches (s = {s})");
    let source = source_patches_stage(dataset, layout, &patch_cfg, s)?;
    log::info!("translating {} patches", source.records.len());
    let translated = translate_stage(translator, &source, layout)?;
    blend_stage(dataset, &translated, layout, cfg.blend.n)
}

/// One candidate row per threshold: mine, augment, retrain and score.
fn augment_and_retrain(
    cfg: &ExperimentConfig,
    layout: &RunLayout,
    dataset: &DatasetManifest,
    generated: &DatasetManifest,
    scorer: &Scorer<'_>,
    translator_sha: &str,
) -> Result<Vec<RowInput>> {
    let tag = slug(scorer.row_type);
    let scored = score_stage(scorer.classifier, generated, layout, None)?;
    write_scores_csv(&layout.score_file(&format!("generated_{tag}")), &scored)?;
    let mut rows = Vec::with_capacity(cfg.t_grid.len());
    for &t in &cfg.t_grid {
        let mining = partition_by_score(&generated.records, &scored.scores, t, &scorer.id)?;
        let mining_csv = layout.reports().join(format!("mining_{tag}_{}.csv", t_tag(t)));
        std::fs::write(&mining_csv, mining.to_csv()).map_err(|e| Error::io(&mining_csv, e))?;
        let kept = mining.kept_records();
        log::info!("{}: t = {t} keeps {} of {} generated images", scorer.row_type, kept.len(), generated.records.len());
        let augmented = build_augmented_manifest(dataset, &kept)?;
        let name = format!("{tag}_{}", t_tag(t));
        let (model, scores) = train_and_score(layout, &augmented, &format!("train_{name}"), &name, cfg)?;
        rows.push(RowInput {
            row_type: scorer.row_type.into(),
            role: RowRole::Candidate,
            t,
            augmented_samples: kept.len(),
            val: scores.val,
            test: scores.test,
            provenance: RowProvenance {
                classifier_sha256: model.checkpoint_sha256,
                train_manifest_sha256: model.train_manifest_sha256,
                translator_sha256: Some(translator_sha.to_string()),
                scorer_id: Some(scorer.id.clone()),
                scorer_sha256: Some(scorer.sha256.clone()),
            },
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_tags() {
        assert_eq!(slug(TYPE_TL_G_PL), "tl_g_tl_pl");
        assert_eq!(slug(TYPE_AUGMENTED), "augmented");
        assert_eq!(t_tag(0.85), "t085");
    }

    #[test]
    fn transferred_scale_factor_applies_unless_explicit() {
        let mut cfg = ExperimentConfig { mode: Mode::TransferGenerator, ..Default::default() };
        cfg.patch.s = 2;
        assert_eq!(generation_scale(&cfg, Some(1.0)), 1);
        cfg.patch_s_explicit = true;
        assert_eq!(generation_scale(&cfg, Some(1.0)), 2);
        cfg.mode = Mode::Augmented;
        cfg.patch_s_explicit = false;
        assert_eq!(generation_scale(&cfg, Some(1.0)), 2);
    }
}
