use std::fmt::Write as _;
use std::path::Path;

use lesionforge_nn::{Adam, AdamConfig, Graph, Scalar, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{LossWeights, ObjectiveTerms, Translator, TranslatorArch, TERM_NAMES};
use crate::dataio::Image;
use crate::error::{Error, Result};
use crate::seed::{stage_rng, StageRng};
use crate::tensors::images_to_tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslatorTrainConfig {
    pub arch: TranslatorArch,
    pub loss_weights: LossWeights,
    pub epochs: usize,
    /// Patches per domain in every step; both domains get equal counts.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TranslatorTrainConfig {
    fn default() -> Self {
        Self {
            arch: TranslatorArch::default(),
            loss_weights: LossWeights::default(),
            epochs: 20,
            batch_size: 8,
            adam: AdamConfig { lr: 1e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 },
            seed: 0,
        }
    }
}

impl TranslatorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.loss_weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("translator batch_size must be positive".into()));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config(format!("translator learning rate must be positive, got {}", self.adam.lr)));
        }
        Ok(())
    }
}

/// Epoch-mean objective terms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub epochs: Vec<ObjectiveTerms>,
}

impl LossCurve {
    /// Long format `epoch,term,value`: one row per epoch and term.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,term,value\n");
        for (e, terms) in self.epochs.iter().enumerate() {
            for (name, v) in TERM_NAMES.iter().zip(terms.values()) {
                let _ = writeln!(out, "{},{},{}", e + 1, name, v);
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub struct TrainedTranslator {
    pub translator: Translator<f32>,
    pub curve: LossCurve,
}

/// Optimizer state for alternating updates.
pub(crate) struct Optimizers {
    pub gen: Adam,
    pub disc: Adam,
}

impl Optimizers {
    pub fn new<T: Scalar>(tr: &Translator<T>, cfg: AdamConfig) -> Self {
        Self {
            gen: Adam::new(tr.store(), &tr.generator_params(), cfg),
            disc: Adam::new(tr.store(), &tr.discriminator_params(), cfg),
        }
    }
}

/// One encoder/generator update followed by one discriminator update on the
/// fakes produced by the pre-update generator. Returns the terms measured
/// before either update.
pub(crate) fn alternating_step<T: Scalar>(
    tr: &mut Translator<T>,
    opt: &mut Optimizers,
    x_l: &Tensor<T>,
    x_h: &Tensor<T>,
    w: &LossWeights,
    rng: Option<&mut StageRng>,
) -> Result<ObjectiveTerms> {
    let (terms, gen_grads, fake_l, fake_h) = {
        let mut g = Graph::new(tr.store());
        let l = g.input(x_l.clone());
        let h = g.input(x_h.clone());
        let fwd = tr.joint_forward(&mut g, l, h, w, rng)?;
        let grads = g.backward(fwd.gen_loss)?;
        (fwd.terms, grads, g.value(fwd.fake_l).clone(), g.value(fwd.fake_h).clone())
    };
    if !terms.all_finite() || !gen_grads.all_finite() {
        return Err(Error::Numerical(format!("translator objective diverged: {:?}", terms)));
    }
    let disc_grads = {
        let mut g = Graph::new(tr.store());
        let l = g.input(x_l.clone());
        let h = g.input(x_h.clone());
        let fl = g.input(fake_l);
        let fh = g.input(fake_h);
        let loss = tr.disc_step_graph(&mut g, l, h, fl, fh, w)?;
        g.backward(loss)?
    };
    if !disc_grads.all_finite() {
        return Err(Error::Numerical("discriminator gradients are not finite".into()));
    }
    opt.gen.step(tr.store_mut(), &gen_grads);
    opt.disc.step(tr.store_mut(), &disc_grads);
    Ok(terms)
}

/// `n` indices from a shuffled pool over `0..len`, refilled whenever it runs dry.
fn draw(pool: &mut Vec<usize>, len: usize, n: usize, rng: &mut StageRng) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        if pool.is_empty() {
            *pool = (0..len).collect();
            pool.shuffle(rng);
        }
        out.push(pool.pop().expect("refilled"));
    }
    out
}

/// Trains the joint objective by alternating updates. An epoch is one pass
/// over the larger domain; every step draws one batch per domain, each from
/// its own reshuffled pool, so the smaller domain is revisited within an epoch.
pub fn train_translator(lesion: &[Image], nonlesion: &[Image], cfg: &TranslatorTrainConfig) -> Result<TrainedTranslator> {
    cfg.validate()?;
    if lesion.is_empty() || nonlesion.is_empty() {
        return Err(Error::Data(format!(
            "translator needs patches from both domains, got {} lesion and {} non-lesion",
            lesion.len(),
            nonlesion.len()
        )));
    }
    let side = cfg.arch.side;
    if let Some(p) = lesion.iter().chain(nonlesion).find(|p| p.width() != side || p.height() != side) {
        return Err(Error::Data(format!("translator patches must be {side}x{side}, got {}x{}", p.width(), p.height())));
    }
    let mut tr = Translator::<f32>::new(cfg.arch, cfg.seed)?;
    let mut opt = Optimizers::new(&tr, cfg.adam);
    let mut order_rng = stage_rng(cfg.seed, "translator-order");
    let mut noise_rng = stage_rng(cfg.seed, "translator-noise");
    let mut curve = LossCurve::default();
    let mut pools = (Vec::new(), Vec::new());
    let steps = lesion.len().max(nonlesion.len()).div_ceil(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        let mut sum = ObjectiveTerms::default();
        let mut seen = 0usize;
        for _ in 0..steps {
            let les = draw(&mut pools.0, lesion.len(), cfg.batch_size, &mut order_rng);
            let neg = draw(&mut pools.1, nonlesion.len(), cfg.batch_size, &mut order_rng);
            let xl = images_to_tensor::<f32>(&les.iter().map(|&i| &lesion[i]).collect::<Vec<_>>())?;
            let xh = images_to_tensor::<f32>(&neg.iter().map(|&i| &nonlesion[i]).collect::<Vec<_>>())?;
            let terms = alternating_step(&mut tr, &mut opt, &xl, &xh, &cfg.loss_weights, Some(&mut noise_rng))
                .map_err(|e| match e {
                    Error::Numerical(m) => Error::Numerical(format!("epoch {}: {m}", epoch + 1)),
                    other => other,
                })?;
            sum.scaled_add(&terms, 1.0);
            seen += 1;
        }
        let mut mean = ObjectiveTerms::default();
        mean.scaled_add(&sum, 1.0 / seen as f64);
        log::info!("translator epoch {}/{}: total {:.4}", epoch + 1, cfg.epochs, mean.total());
        curve.epochs.push(mean);
        tr.epoch = epoch + 1;
    }
    Ok(TrainedTranslator { translator: tr, curve })
}
