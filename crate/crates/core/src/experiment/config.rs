use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::TrainConfig;
use crate::dataio::SynthConfig;
use crate::error::{Error, Result};
use crate::patching::PatchConfig;
use crate::pseudolabel::DEFAULT_T_GRID;
use crate::seed::{derive_seed, sha256_hex};
use crate::translation::TranslatorTrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Augmented,
    /// Generate with a translator trained on another body part.
    TransferGenerator,
    /// Transferred translator and transferred pseudo-label scorer; the
    /// transferred-translator-only variant is reported alongside.
    TransferGeneratorPlusPseudolabeller,
    /// Own translator, transferred pseudo-label scorer.
    TransferPseudolabeller,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Augmented => "augmented",
            Mode::TransferGenerator => "transfer_generator",
            Mode::TransferGeneratorPlusPseudolabeller => "transfer_generator_plus_pseudolabeller",
            Mode::TransferPseudolabeller => "transfer_pseudolabeller",
        }
    }

    pub fn uses_transferred_translator(self) -> bool {
        matches!(self, Mode::TransferGenerator | Mode::TransferGeneratorPlusPseudolabeller)
    }

    pub fn uses_transferred_scorer(self) -> bool {
        matches!(self, Mode::TransferGeneratorPlusPseudolabeller | Mode::TransferPseudolabeller)
    }

    pub fn is_transfer(self) -> bool {
        self.uses_transferred_translator() || self.uses_transferred_scorer()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlendSettings {
    /// Exponent of the cosine falloff mask.
    pub n: f64,
}

impl Default for BlendSettings {
    fn default() -> Self {
        Self { n: 2.0 }
    }
}

/// Checkpoints produced by a run on the source body part.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSettings {
    pub translator: Option<PathBuf>,
    pub scorer: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FigureSettings {
    pub enabled: bool,
    /// Generated records rendered as original/translated/blended triptychs.
    pub triptychs: usize,
}

impl Default for FigureSettings {
    fn default() -> Self {
        Self { enabled: true, triptychs: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Master seed; every stage seed is derived from it by stage name.
    pub seed: u64,
    pub mode: Mode,
    pub source_body_part: Option<String>,
    pub target_body_part: Option<String>,
    pub t_grid: Vec<f64>,
    pub bootstrap_b: usize,
    pub synth: SynthConfig,
    pub patch: PatchConfig,
    pub blend: BlendSettings,
    pub translator: TranslatorTrainConfig,
    pub classifier: TrainConfig,
    pub transfer: TransferSettings,
    pub figures: FigureSettings,
    /// Whether `patch.s` was given explicitly (transfer modes otherwise use
    /// the scale factor stored with the transferred translator).
    #[serde(skip)]
    pub patch_s_explicit: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            mode: Mode::Baseline,
            source_body_part: None,
            target_body_part: None,
            t_grid: DEFAULT_T_GRID.to_vec(),
            bootstrap_b: 2000,
            synth: SynthConfig::default(),
            patch: PatchConfig::default(),
            blend: BlendSettings::default(),
            translator: TranslatorTrainConfig::default(),
            classifier: TrainConfig::default(),
            transfer: TransferSettings::default(),
            figures: FigureSettings::default(),
            patch_s_explicit: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let explicit = raw.get("patch").and_then(|p| p.as_table()).is_some_and(|p| p.contains_key("s"));
        let mut cfg: ExperimentConfig = raw.try_into().map_err(|e| Error::Config(format!("{e}")))?;
        cfg.patch_s_explicit = explicit;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative transfer checkpoint paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.transfer.translator, &mut cfg.transfer.scorer].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {}, expected {}",
                self.schema_version, SCHEMA_VERSION
            )));
        }
        if self.t_grid.is_empty() || self.t_grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config(format!("t_grid must be non-empty with values in [0, 1], got {:?}", self.t_grid)));
        }
        if self.bootstrap_b < 100 {
            return Err(Error::Config(format!("bootstrap_b must be at least 100, got {}", self.bootstrap_b)));
        }
        if !(self.blend.n > 0.0 && self.blend.n.is_finite()) {
            return Err(Error::Config(format!("blend exponent n must be positive, got {}", self.blend.n)));
        }
        self.synth.validate()?;
        self.patch.validate()?;
        self.translator.validate()?;
        self.classifier.validate()?;
        // A transferred translator brings its own architecture.
        if !self.mode.uses_transferred_translator() && self.patch.model_input_side != self.translator.arch.side {
            return Err(Error::Config(format!(
                "patch.model_input_side ({}) must equal translator.arch.side ({})",
                self.patch.model_input_side, self.translator.arch.side
            )));
        }
        if self.mode.is_transfer() {
            if self.source_body_part.is_none() || self.target_body_part.is_none() {
                return Err(Error::Config(format!(
                    "mode {} needs source_body_part and target_body_part",
                    self.mode.as_str()
                )));
            }
            if self.mode.uses_transferred_translator() && self.transfer.translator.is_none() {
                return Err(Error::Config(format!("mode {} needs transfer.translator", self.mode.as_str())));
            }
            if self.mode.uses_transferred_scorer() && self.transfer.scorer.is_none() {
                return Err(Error::Config(format!("mode {} needs transfer.scorer", self.mode.as_str())));
            }
        }
        Ok(())
    }

    /// Body part tag of the data this run trains and evaluates on.
    pub fn body_part(&self) -> String {
        self.target_body_part.clone().unwrap_or_else(|| self.synth.family.tag().to_string())
    }

    /// Copy with every stage seed derived from the master seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.synth.seed = derive_seed(self.seed, "synth");
        c.patch.seed = derive_seed(self.seed, "patch");
        c.translator.seed = derive_seed(self.seed, "translator");
        c.classifier.seed = derive_seed(self.seed, "classifier");
        c
    }

    pub fn bootstrap_seed(&self) -> u64 {
        derive_seed(self.seed, "bootstrap")
    }

    /// SHA-256 of the resolved configuration's canonical JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(&self.resolved()).expect("config serializes");
        sha256_hex(json.as_bytes())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = ExperimentConfig::from_toml_str("schema_version = 1\nseed = 4\nmode = \"augmented\"\n[patch]\nn = 3\nmodel_input_side = 32\n").unwrap();
        assert_eq!(cfg.mode, Mode::Augmented);
        assert_eq!(cfg.patch.n, 3);
        assert_eq!(cfg.patch.s, 2);
        assert!(!cfg.patch_s_explicit);
        assert_eq!(cfg.t_grid, DEFAULT_T_GRID.to_vec());
        let with_s = ExperimentConfig::from_toml_str("[patch]\ns = 1\nmodel_input_side = 32\n").unwrap();
        assert!(with_s.patch_s_explicit);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ExperimentConfig::from_toml_str("schema_version = 2\n[patch]\nmodel_input_side = 32").is_err());
        assert!(ExperimentConfig::from_toml_str("bogus = 1\n[patch]\nmodel_input_side = 32").is_err());
        assert!(ExperimentConfig::from_toml_str("mode = \"transfer_generator\"\n[patch]\nmodel_input_side = 32").is_err());
        assert!(ExperimentConfig::from_toml_str("[patch]\nmodel_input_side = 64").is_err());
    }

    #[test]
    fn stage_seeds_follow_master_seed() {
        let a = ExperimentConfig { patch: PatchConfig { model_input_side: 32, ..PatchConfig::default() }, ..Default::default() };
        let b = a.with_seed(1);
        assert_ne!(a.resolved().classifier.seed, b.resolved().classifier.seed);
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
