use std::path::Path;

use lesionforge_nn::{Adam, AdamConfig, Graph};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{augment_image, AugmentConfig, Classifier, ClassifierArch, N_BLOCKS};
use crate::dataio::{load_image, DatasetManifest, Image, Label, Split};
use crate::error::{Error, Result};
use crate::metrics::{roc_auc, ScoredSet};
use crate::seed::stage_rng;
use crate::tensors::images_to_tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: ClassifierArch,
    pub lr: f64,
    /// Factor applied to the learning rate when validation AUC plateaus.
    pub plateau_factor: f64,
    /// Epochs without validation improvement that count as a plateau.
    pub plateau_patience: usize,
    pub weight_decay: f64,
    pub augment: AugmentConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a new best validation AUC.
    pub early_stop_patience: usize,
    /// Leading convolutional blocks kept fixed during training.
    pub freeze_blocks: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: ClassifierArch::default(),
            lr: 1e-4,
            plateau_factor: 0.9,
            plateau_patience: 2,
            weight_decay: 1e-4,
            augment: AugmentConfig::default(),
            batch_size: 16,
            max_epochs: 30,
            early_stop_patience: 8,
            freeze_blocks: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config(format!("plateau factor must lie in (0, 1), got {}", self.plateau_factor)));
        }
        if self.weight_decay < 0.0 || self.batch_size == 0 || self.plateau_patience == 0 {
            return Err(Error::Config("weight decay must be non-negative, batch size and patience positive".into()));
        }
        if self.freeze_blocks > N_BLOCKS {
            return Err(Error::Config(format!("cannot freeze {} of {} blocks", self.freeze_blocks, N_BLOCKS)));
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` after `patience` epochs without
/// a new best metric.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    factor: f64,
    patience: usize,
    best: Option<f64>,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self { lr, factor, patience, best: None, stale: 0 }
    }

    /// Records one epoch's metric (higher is better); true when the rate decayed.
    pub fn step(&mut self, metric: f64) -> bool {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.lr *= self.factor;
            self.stale = 0;
            return true;
        }
        false
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub image: Image,
    pub lesion: bool,
}

fn load_split(manifest: &DatasetManifest, dir: &Path, split: Split) -> Result<Vec<LabeledImage>> {
    manifest
        .records
        .iter()
        .filter(|r| r.split == split)
        .map(|r| Ok(LabeledImage { image: load_image(&manifest.resolve(dir, r))?, lesion: r.label == Label::Lesion }))
        .collect()
}

/// Trains on the train split of `manifest` and selects on its val split.
pub fn train_classifier(
    manifest: &DatasetManifest,
    manifest_dir: &Path,
    cfg: &TrainConfig,
    init: Option<Classifier>,
) -> Result<Classifier> {
    let train = load_split(manifest, manifest_dir, Split::Train)?;
    let val = load_split(manifest, manifest_dir, Split::Val)?;
    train_classifier_on(&train, &val, cfg, init)
}

/// Class-weighted BCE with Adam, plateau decay on validation AUC, early
/// stopping, and the best-validation weights returned. `init` continues from
/// existing weights (for fine-tuning with frozen blocks).
pub fn train_classifier_on(
    train: &[LabeledImage],
    val: &[LabeledImage],
    cfg: &TrainConfig,
    init: Option<Classifier>,
) -> Result<Classifier> {
    cfg.validate()?;
    let n_pos = train.iter().filter(|s| s.lesion).count();
    let n_neg = train.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data(format!(
            "classifier training needs both classes, got {} lesion and {} non-lesion images",
            n_pos, n_neg
        )));
    }
    if val.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let mut clf = match init {
        Some(c) if c.arch != cfg.arch => {
            return Err(Error::Config(format!("initial weights have architecture {:?}, config asks {:?}", c.arch, cfg.arch)))
        }
        Some(mut c) => {
            c.history.clear();
            c.seed = cfg.seed;
            c
        }
        None => Classifier::new(cfg.arch, cfg.seed)?,
    };
    if cfg.max_epochs == 0 {
        return Ok(clf);
    }
    let train_imgs: Vec<Image> = train.iter().map(|s| clf.prepare(&s.image)).collect();
    let val_imgs: Vec<Image> = val.iter().map(|s| clf.prepare(&s.image)).collect();
    let val_labels: Vec<bool> = val.iter().map(|s| s.lesion).collect();
    let val_ids: Vec<String> = (0..val.len()).map(|i| i.to_string()).collect();

    let n = train.len() as f64;
    let w_pos = (n / (2.0 * n_pos as f64)) as f32;
    let w_neg = (n / (2.0 * n_neg as f64)) as f32;
    let adam_cfg = AdamConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamConfig::default() };
    let mut opt = Adam::new(clf.store(), &clf.trainable_params(cfg.freeze_blocks), adam_cfg);
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience);
    let mut order_rng = stage_rng(cfg.seed, "classifier-order");
    let mut aug_rng = stage_rng(cfg.seed, "classifier-augment");
    let mut best: Option<(f64, lesionforge_nn::StoreSnapshot)> = None;
    let mut since_best = 0usize;
    let mut history = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Image> = chunk.iter().map(|&i| augment_image(&train_imgs[i], &cfg.augment, &mut aug_rng)).collect();
            let targets: Vec<f32> = chunk.iter().map(|&i| if train[i].lesion { 1.0 } else { 0.0 }).collect();
            let weights: Vec<f32> = chunk.iter().map(|&i| if train[i].lesion { w_pos } else { w_neg }).collect();
            let grads = {
                let mut g = Graph::new(clf.store());
                let x = g.input(images_to_tensor(&batch.iter().collect::<Vec<_>>())?);
                let logits = clf.logits_graph(&mut g, x)?;
                let loss = g.bce_with_logits(logits, targets, weights)?;
                let l = g.value(loss).item() as f64;
                if !l.is_finite() {
                    return Err(Error::Numerical(format!("classifier loss is {} at epoch {}", l, epoch)));
                }
                loss_sum += l * chunk.len() as f64;
                g.backward(loss)?
            };
            opt.step(clf.store_mut(), &grads);
        }
        let scores = clf.score_prepared(&val_imgs.iter().collect::<Vec<_>>())?;
        let set = ScoredSet::new(Split::Val, val_ids.clone(), val_labels.clone(), scores)?;
        let val_auc = roc_auc(&set)?;
        history.push(EpochRecord { epoch, train_loss: loss_sum / n, val_auc, lr: opt.lr() });
        log::info!("classifier epoch {}/{}: loss {:.4}, val AUC {:.4}", epoch, cfg.max_epochs, loss_sum / n, val_auc);
        if best.as_ref().is_none_or(|(b, _)| val_auc > *b) {
            best = Some((val_auc, clf.store().snapshot()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if sched.step(val_auc) {
            opt.set_lr(sched.lr);
        }
        if since_best >= cfg.early_stop_patience {
            break;
        }
    }
    let (_, snap) = best.expect("at least one epoch ran");
    clf.store_mut().restore(&snap)?;
    clf.history = history;
    Ok(clf)
}
