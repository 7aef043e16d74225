use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lesionforge_core::classifier::train_classifier;
use lesionforge_core::dataio::{DatasetManifest, Split};
use lesionforge_core::experiment::figures::emit_figures;
use lesionforge_core::experiment::pipeline::load_classifier;
use lesionforge_core::experiment::report::{evaluate_rows, Report, RowInput, RowProvenance, RowRole, REPORT_FORMAT};
use lesionforge_core::experiment::stages::{
    self, blend_stage, file_sha256, load_manifest, load_translator, patchify_stage, read_scores_csv, save_manifest,
    score_stage, synth_stage, train_translator_stage, translate_stage, write_scores_csv,
};
use lesionforge_core::experiment::{run_experiment, ExperimentConfig, RunLayout};
use lesionforge_core::pseudolabel::{build_augmented_manifest, mine_hard_positives};
use lesionforge_core::{Error, Result};

/// Generative data augmentation for imbalanced lesion classification.
#[derive(Parser, Debug)]
#[command(name = "lesionforge", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration's.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory holding data, manifests, checkpoints, scores, reports and figures.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic dataset and its manifest.
    Synth {
        /// Output directory; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Crop translator-training patches and source patches for generation.
    Patchify {
        /// Take the scale factor from this translator checkpoint instead of the config.
        #[arg(long)]
        translator: Option<PathBuf>,
    },
    /// Train the two-domain translator on the patch manifest.
    TrainTranslator,
    /// Translate source patches into the lesion domain.
    Translate {
        /// Translator checkpoint; defaults to the run's own.
        #[arg(long)]
        translator: Option<PathBuf>,
    },
    /// Blend translated patches back into full images.
    Blend,
    /// Train a classifier on a manifest's train split and select on its val split.
    TrainClassifier {
        /// Manifest name under manifests/.
        #[arg(long, default_value = "dataset")]
        manifest: String,
        /// Checkpoint name under checkpoints/.
        #[arg(long, default_value = "baseline")]
        name: String,
    },
    /// Score a manifest with a classifier and write `image_id,label,score`.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "dataset")]
        manifest: String,
        /// Restrict to one split (train, val, test, source).
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mine generated images the scorer rates at or above `t`.
    Pseudolabel {
        #[arg(long)]
        t: f64,
        /// Scorer checkpoint; defaults to the run's baseline.
        #[arg(long)]
        scorer: Option<PathBuf>,
    },
    /// Add the kept generated images of a mining pass to the training set.
    Augment {
        #[arg(long)]
        t: f64,
        /// Name of the augmented manifest under manifests/.
        #[arg(long, default_value = "augmented")]
        name: String,
    },
    /// Report AUC with bootstrap intervals, significance, operating point and
    /// sensitivity/specificity for scored models against a baseline.
    Evaluate {
        /// Score file stem under scores/ with `_val.csv` and `_test.csv` variants.
        #[arg(long, default_value = "baseline")]
        baseline: String,
        /// Further score stems, each reported as its own row.
        #[arg(long = "model")]
        models: Vec<String>,
    },
    /// Run the configured mode end to end.
    Run,
    /// Render figures from an existing run.
    Figures,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    Ok(match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    }
    .resolved())
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        "source" => Ok(Split::Source),
        other => Err(Error::Usage(format!("unknown split {other:?}"))),
    }
}

fn t_name(t: f64) -> String {
    format!("t{:03}", (t * 100.0).round() as u32)
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Data(format!("{what} not found at {}; run the earlier stage first", path.display())))
    }
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let run_dir = match &cli.command {
        Command::Synth { out: Some(dir) } => dir.clone(),
        _ => cli.common.run_dir.clone(),
    };
    let layout = RunLayout::new(&run_dir);
    if let Command::Run = cli.command {
        let report = run_experiment(&cfg, &run_dir)?;
        print!("{}", report.to_markdown());
        return Ok(());
    }
    layout.create()?;
    let _lock = layout.lock()?;
    let dataset = || load_manifest(&layout, stages::DATASET);
    match cli.command {
        Command::Run => unreachable!("handled above"),
        Command::Synth { .. } => {
            let m = synth_stage(&cfg.synth, &layout)?;
            println!("{} images written to {}", m.records.len(), layout.data().display());
        }
        Command::Patchify { translator } => {
            let scale = match &translator {
                Some(p) => load_translator(p)?.1.scale_factor,
                None => None,
            };
            let s = if translator.is_some() && !cfg.patch_s_explicit { scale.map_or(cfg.patch.s, |s| s.round() as u32) } else { cfg.patch.s };
            let sets = patchify_stage(&dataset()?, &layout, &cfg.patch, s)?;
            for w in &sets.warnings {
                log::warn!("{w}");
            }
            println!("{} translator patches, {} source patches (s = {s})", sets.translator.records.len(), sets.source.records.len());
        }
        Command::TrainTranslator => {
            let patches = load_manifest(&layout, stages::TRANSLATOR_PATCHES)?;
            let (_, path) = train_translator_stage(&patches, &layout, &cfg.translator, cfg.patch.s)?;
            println!("translator checkpoint {}", path.display());
        }
        Command::Translate { translator } => {
            let path = translator.unwrap_or_else(|| layout.checkpoint("translator"));
            require(&path, "translator checkpoint")?;
            let (tr, _) = load_translator(&path)?;
            let source = load_manifest(&layout, stages::SOURCE_PATCHES)?;
            let m = translate_stage(&tr, &source, &layout)?;
            println!("{} patches translated", m.records.len());
        }
        Command::Blend => {
            let translated = load_manifest(&layout, stages::TRANSLATED)?;
            let m = blend_stage(&dataset()?, &translated, &layout, cfg.blend.n)?;
            println!("{} generated images", m.records.len());
        }
        Command::TrainClassifier { manifest, name } => {
            let m = load_manifest(&layout, &manifest)?;
            let clf = train_classifier(&m, &layout.manifests(), &cfg.classifier, None)?;
            let path = layout.checkpoint(&name);
            clf.to_checkpoint().save(&path)?;
            for split in [Split::Val, Split::Test] {
                let set = score_stage(&clf, &m, &layout, Some(split))?;
                write_scores_csv(&layout.score_file(&format!("{name}_{}", split.as_str())), &set)?;
            }
            let best = clf.history.iter().map(|e| e.val_auc).fold(f64::NAN, f64::max);
            println!("classifier checkpoint {} (best val AUC {best:.4})", path.display());
        }
        Command::Score { checkpoint, manifest, split, out } => {
            let clf = load_classifier(&checkpoint)?;
            let m = load_manifest(&layout, &manifest)?;
            let split = split.as_deref().map(parse_split).transpose()?;
            let set = score_stage(&clf, &m, &layout, split)?;
            write_scores_csv(&out, &set)?;
            println!("{} scores written to {}", set.len(), out.display());
        }
        Command::Pseudolabel { t, scorer } => {
            let path = scorer.unwrap_or_else(|| layout.checkpoint("baseline"));
            require(&path, "scorer checkpoint")?;
            let clf = load_classifier(&path)?;
            let generated = load_manifest(&layout, stages::GENERATED)?;
            let scorer_id = format!("classifier:{}", &file_sha256(&path)?[..12]);
            let mining = mine_hard_positives(&generated, &layout.manifests(), &clf, &scorer_id, t)?;
            let csv = layout.reports().join(format!("mining_{}.csv", t_name(t)));
            std::fs::write(&csv, mining.to_csv()).map_err(|e| Error::io(&csv, e))?;
            let kept = DatasetManifest::new(generated.seed, generated.root.clone(), mining.kept_records());
            save_manifest(&layout, &format!("kept_{}", t_name(t)), &kept)?;
            println!("kept {} of {} generated images at t = {t}", mining.kept.len(), generated.records.len());
        }
        Command::Augment { t, name } => {
            let kept = load_manifest(&layout, &format!("kept_{}", t_name(t)))?;
            let m = build_augmented_manifest(&dataset()?, &kept.records)?;
            save_manifest(&layout, &name, &m)?;
            println!("{} records ({} generated) in manifests/{name}.jsonl", m.records.len(), kept.records.len());
        }
        Command::Evaluate { baseline, models } => {
            let mut inputs = Vec::new();
            for (k, stem) in std::iter::once(&baseline).chain(&models).enumerate() {
                let val = read_scores_csv(&layout.score_file(&format!("{stem}_val")), Split::Val)?;
                let test = read_scores_csv(&layout.score_file(&format!("{stem}_test")), Split::Test)?;
                let role = if k == 0 { RowRole::Baseline } else { RowRole::Candidate };
                inputs.push(RowInput { row_type: stem.clone(), role, t: 0.0, augmented_samples: 0, val, test, provenance: RowProvenance::default() });
            }
            let rows = evaluate_rows(&inputs, cfg.bootstrap_b, cfg.bootstrap_seed())?;
            let report = Report {
                format: REPORT_FORMAT.into(),
                mode: "evaluate".into(),
                seed: cfg.seed,
                body_part: cfg.body_part(),
                source_body_part: cfg.source_body_part.clone(),
                config_sha256: cfg.hash(),
                dataset_manifest_sha256: String::new(),
                bootstrap_b: cfg.bootstrap_b,
                bootstrap_seed: cfg.bootstrap_seed(),
                ci_method: "percentile".into(),
                test_positives: inputs[0].test.n_pos(),
                test_negatives: inputs[0].test.n_neg(),
                notes: vec![],
                rows,
            };
            let dir = layout.reports().join("evaluation");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            report.save(&dir)?;
            print!("{}", report.to_csv());
        }
        Command::Figures => {
            for notice in emit_figures(&run_dir)? {
                log::warn!("{notice}");
            }
            println!("figures written to {}", layout.figures().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
