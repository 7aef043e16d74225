//! Small dilated convolutional classifier used both as the evaluated model
//! and as the pseudo-labelling scorer.

mod augment;
mod train;

pub use augment::{augment_image, AugmentConfig};
pub use train::{train_classifier, train_classifier_on, EpochRecord, LabeledImage, PlateauScheduler, TrainConfig};

use std::path::Path;

use lesionforge_nn::{he_uniform, ConvGeom, Graph, ParamId, ParamStore, StoreSnapshot, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::dataio::{load_image, DatasetManifest, DatasetRecord, Image, Label};
use crate::error::{Error, Result};
use crate::metrics::ScoredSet;
use crate::seed::stage_rng;
use crate::tensors::images_to_tensor;

pub const N_BLOCKS: usize = 5;

/// Reduction of the last feature map to one value per channel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Avg,
    /// Responds to small localized findings that averaging would dilute.
    #[default]
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierArch {
    /// Model input width in pixels.
    pub width: usize,
    /// Model input height in pixels.
    pub height: usize,
    /// Channels of the five blocks: two stride-2 blocks, one plain residual
    /// block, then two dilated residual blocks.
    pub channels: usize,
    pub pooling: Pooling,
}

impl Default for ClassifierArch {
    fn default() -> Self {
        Self { width: 128, height: 256, channels: 16, pooling: Pooling::Max }
    }
}

impl ClassifierArch {
    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 || self.channels == 0 {
            return Err(Error::Config(format!(
                "classifier input must be at least 8x8 with positive channels, got {}x{} / {}",
                self.width, self.height, self.channels
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    w: ParamId,
    b: ParamId,
    geom: ConvGeom,
    residual: bool,
}

#[derive(Clone, Debug)]
pub struct Classifier {
    arch: ClassifierArch,
    store: ParamStore<f32>,
    blocks: Vec<Block>,
    head_w: ParamId,
    head_b: ParamId,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
}

impl Classifier {
    pub fn new(arch: ClassifierArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = stage_rng(seed, "classifier-init");
        let mut store = ParamStore::new();
        let c = arch.channels;
        let half = c.div_ceil(2);
        let specs = [
            (1, half, ConvGeom::new(3, 2, 1, 1), false),
            (half, c, ConvGeom::new(3, 2, 1, 1), false),
            (c, c, ConvGeom::new(3, 1, 1, 1), true),
            (c, c, ConvGeom::new(3, 1, 2, 2), true),
            (c, c, ConvGeom::new(3, 1, 2, 2), true),
        ];
        let blocks = specs
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, geom, residual))| Block {
                w: store.add(format!("block{i}.w"), he_uniform(&mut rng, &[cout, cin, 3, 3], cin * 9)),
                b: store.add(format!("block{i}.b"), Tensor::zeros(&[cout])),
                geom,
                residual,
            })
            .collect();
        let head_w = store.add("head.w", he_uniform(&mut rng, &[1, c], c));
        let head_b = store.add("head.b", Tensor::zeros(&[1]));
        Ok(Self { arch, store, blocks, head_w, head_b, seed, history: Vec::new() })
    }

    pub fn arch(&self) -> &ClassifierArch {
        &self.arch
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub(crate) fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    /// Trainable parameters once the first `frozen` blocks are held fixed.
    pub fn trainable_params(&self, frozen: usize) -> Vec<ParamId> {
        self.blocks
            .iter()
            .skip(frozen)
            .flat_map(|b| [b.w, b.b])
            .chain([self.head_w, self.head_b])
            .collect()
    }

    /// Logits `[B, 1]` for a `[B, 1, H, W]` batch.
    pub(crate) fn logits_graph(&self, g: &mut Graph<f32>, x: Var) -> Result<Var> {
        let mut h = x;
        for blk in &self.blocks {
            let y = g.conv2d(h, blk.w, Some(blk.b), blk.geom)?;
            let y = g.relu(y);
            h = if blk.residual { g.add(h, y)? } else { y };
        }
        let pooled = match self.arch.pooling {
            Pooling::Avg => g.global_avg_pool(h)?,
            Pooling::Max => g.global_max_pool(h)?,
        };
        Ok(g.linear(pooled, self.head_w, self.head_b)?)
    }

    /// Aspect-preserving pad-and-resize to the model resolution.
    pub fn prepare(&self, image: &Image) -> Image {
        if image.width() == self.arch.width && image.height() == self.arch.height {
            image.clone()
        } else {
            image.letterbox(self.arch.width, self.arch.height)
        }
    }

    /// Lesion probabilities for images already at model resolution.
    pub(crate) fn score_prepared(&self, images: &[&Image]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let mut g = Graph::new(&self.store);
            let x = g.input(images_to_tensor(chunk)?);
            let logits = self.logits_graph(&mut g, x)?;
            let p = g.sigmoid(logits);
            out.extend(g.value(p).data().iter().map(|&v| v as f64));
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("classifier produced a non-finite score".into()));
        }
        Ok(out)
    }

    pub fn score(&self, image: &Image) -> Result<f64> {
        Ok(self.score_prepared(&[&self.prepare(image)])?[0])
    }

    pub fn score_batch(&self, images: &[Image]) -> Result<Vec<f64>> {
        let prepared: Vec<Image> = images.iter().map(|i| self.prepare(i)).collect();
        self.score_prepared(&prepared.iter().collect::<Vec<_>>())
    }

    /// Scores `records` of a manifest stored in `manifest_dir`.
    pub fn score_records(
        &self,
        manifest: &DatasetManifest,
        manifest_dir: &Path,
        records: &[&DatasetRecord],
    ) -> Result<Vec<f64>> {
        let mut images = Vec::with_capacity(records.len());
        for r in records {
            images.push(self.prepare(&load_image(&manifest.resolve(manifest_dir, r))?));
        }
        self.score_prepared(&images.iter().collect::<Vec<_>>())
    }

    /// Scores one split of a manifest as a labelled set.
    pub fn score_split(&self, manifest: &DatasetManifest, manifest_dir: &Path, split: crate::dataio::Split) -> Result<ScoredSet> {
        let recs: Vec<&DatasetRecord> = manifest.records.iter().filter(|r| r.split == split).collect();
        let scores = self.score_records(manifest, manifest_dir, &recs)?;
        ScoredSet::new(
            split,
            recs.iter().map(|r| r.image_id.clone()).collect(),
            recs.iter().map(|r| r.label == Label::Lesion).collect(),
            scores,
        )
    }

    pub fn to_checkpoint(&self) -> ClassifierCheckpoint {
        ClassifierCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            arch: self.arch,
            seed: self.seed,
            history: self.history.clone(),
            params: self.store.snapshot(),
        }
    }

    pub fn from_checkpoint(ck: &ClassifierCheckpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != 1 {
            return Err(Error::Data(format!("not a classifier checkpoint: {} v{}", ck.format, ck.version)));
        }
        let mut c = Self::new(ck.arch, ck.seed)?;
        c.store.restore(&ck.params)?;
        c.history = ck.history.clone();
        Ok(c)
    }
}

const CHECKPOINT_FORMAT: &str = "lesionforge-classifier";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierCheckpoint {
    pub format: String,
    pub version: u32,
    pub arch: ClassifierArch,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    pub params: StoreSnapshot,
}

impl ClassifierCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::dataio::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::dataio::read_json(path)
    }
}
