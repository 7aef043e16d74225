use lesionforge_nn::{Graph, ParamId, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::{domain_slot, Translator};
use crate::dataio::Domain;
use crate::error::{Error, Result};
use crate::seed::StageRng;

/// Gradient of each parameter tensor a term depends on.
pub type ParamGradients<T> = Vec<(ParamId, Tensor<T>)>;

/// Names of the logged objective terms, in loss-curve order.
pub const TERM_NAMES: [&str; 7] = ["VAE_l", "GAN_l", "CC_l", "VAE_h", "GAN_h", "CC_h", "total"];

/// Objective weights. The defaults are the published UNIT configuration:
/// adversarial 10, KL 0.1, reconstruction 100, cycle KL 0.1, cycle
/// reconstruction 100.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda0: 10.0, lambda1: 0.1, lambda2: 100.0, lambda3: 0.1, lambda4: 100.0 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self { lambda0: 0.0, lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, lambda4: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda0, self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if all.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative, got {:?}", all)));
        }
        Ok(())
    }
}

/// `KL(N(μ, diag e^logvar) ‖ N(0, I))`, summed over dimensions.
pub fn diag_gaussian_kl(mu: &[f64], logvar: &[f64]) -> f64 {
    assert_eq!(mu.len(), logvar.len(), "mean and log-variance lengths differ");
    mu.iter().zip(logvar).map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv)).sum()
}

/// Values of the six named objective terms. The GAN entries hold the
/// min-max value `λ0 (E log D(real) + E log(1 − D(fake)))`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub vae_l: f64,
    pub gan_l: f64,
    pub cc_l: f64,
    pub vae_h: f64,
    pub gan_h: f64,
    pub cc_h: f64,
}

impl ObjectiveTerms {
    pub fn total(&self) -> f64 {
        self.vae_l + self.gan_l + self.cc_l + self.vae_h + self.gan_h + self.cc_h
    }

    /// Terms in [`TERM_NAMES`] order, total last.
    pub fn values(&self) -> [f64; 7] {
        [self.vae_l, self.gan_l, self.cc_l, self.vae_h, self.gan_h, self.cc_h, self.total()]
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    pub(crate) fn scaled_add(&mut self, other: &ObjectiveTerms, k: f64) {
        self.vae_l += k * other.vae_l;
        self.gan_l += k * other.gan_l;
        self.cc_l += k * other.cc_l;
        self.vae_h += k * other.vae_h;
        self.gan_h += k * other.gan_h;
        self.cc_h += k * other.cc_h;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanTerms {
    /// Min-max value, maximized by the discriminator.
    pub objective: f64,
    /// `−objective`, minimized by the discriminator.
    pub d_loss: f64,
    /// Non-saturating `λ0 · E[−log D(fake)]`, minimized by the generator.
    pub g_loss: f64,
}

/// A scalar training objective, for inspection and gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// `λ1 KL + λ2 L1` reconstruction of the domain's batch.
    Vae(Domain),
    /// `λ3 (KL + KL) + λ4 L1` after translating away and back.
    Cycle(Domain),
    /// Non-saturating generator loss of the domain's discriminator.
    GanGenerator(Domain),
    /// Discriminator loss, real batch against translations from the other domain.
    GanDiscriminator(Domain),
    /// Everything the encoders and generators minimize together.
    Generator,
}

pub(crate) struct GanVars {
    pub d_loss: Var,
    pub g_loss: Var,
}

pub(crate) struct JointForward {
    pub gen_loss: Var,
    pub terms: ObjectiveTerms,
    /// Non-lesion inputs translated into the lesion domain.
    pub fake_l: Var,
    /// Lesion inputs translated into the non-lesion domain.
    pub fake_h: Var,
}

fn value<T: Scalar>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).item().as_f64()
}

impl<T: Scalar> Translator<T> {
    /// `½ mean(μ²)`: the unit-variance posterior KL averaged over latent elements.
    pub(crate) fn kl_graph(g: &mut Graph<T>, mu: Var) -> Var {
        let m = g.mean_square(mu);
        g.scale(m, 0.5)
    }

    pub(crate) fn vae_graph(
        &self,
        g: &mut Graph<T>,
        slot: usize,
        x: Var,
        w: &LossWeights,
        rng: Option<&mut StageRng>,
    ) -> Result<(Var, Var, Var)> {
        let mu = self.encode_graph(g, slot, x)?;
        let z = Self::sample_graph(g, mu, rng)?;
        let rec = self.decode_graph(g, slot, z)?;
        let kl = Self::kl_graph(g, mu);
        let kl = g.scale(kl, w.lambda1);
        let nll = g.mean_abs_diff(rec, x)?;
        let nll = g.scale(nll, w.lambda2);
        Ok((g.sum_scalars(&[kl, nll]), mu, z))
    }

    /// Cycle term for `x` from domain `src`, given its code; also returns the
    /// translation of `x` into the other domain.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn cycle_graph(
        &self,
        g: &mut Graph<T>,
        src: usize,
        x: Var,
        mu: Var,
        z: Var,
        w: &LossWeights,
        rng: Option<&mut StageRng>,
    ) -> Result<(Var, Var)> {
        let dst = 1 - src;
        let translated = self.decode_graph(g, dst, z)?;
        let mu_t = self.encode_graph(g, dst, translated)?;
        let z_t = Self::sample_graph(g, mu_t, rng)?;
        let back = self.decode_graph(g, src, z_t)?;
        let kl_src = Self::kl_graph(g, mu);
        let kl_dst = Self::kl_graph(g, mu_t);
        let kl = g.sum_scalars(&[kl_src, kl_dst]);
        let kl = g.scale(kl, w.lambda3);
        let nll = g.mean_abs_diff(back, x)?;
        let nll = g.scale(nll, w.lambda4);
        Ok((g.sum_scalars(&[kl, nll]), translated))
    }

    pub(crate) fn gan_graph(&self, g: &mut Graph<T>, slot: usize, real: Var, fake: Var, w: &LossWeights) -> Result<GanVars> {
        let lr = self.disc_graph(g, slot, real)?;
        let lf = self.disc_graph(g, slot, fake)?;
        let real_term = g.bce_with_logits_const(lr, 1.0)?;
        let fake_term = g.bce_with_logits_const(lf, 0.0)?;
        let d = g.sum_scalars(&[real_term, fake_term]);
        let d_loss = g.scale(d, w.lambda0);
        let fool = g.bce_with_logits_const(lf, 1.0)?;
        let g_loss = g.scale(fool, w.lambda0);
        Ok(GanVars { d_loss, g_loss })
    }

    /// Full encoder/generator forward pass for one lesion and one non-lesion batch.
    pub(crate) fn joint_forward(
        &self,
        g: &mut Graph<T>,
        x_l: Var,
        x_h: Var,
        w: &LossWeights,
        mut rng: Option<&mut StageRng>,
    ) -> Result<JointForward> {
        let (vae_l, mu_l, z_l) = self.vae_graph(g, 0, x_l, w, rng.as_deref_mut())?;
        let (vae_h, mu_h, z_h) = self.vae_graph(g, 1, x_h, w, rng.as_deref_mut())?;
        let (cc_l, fake_h) = self.cycle_graph(g, 0, x_l, mu_l, z_l, w, rng.as_deref_mut())?;
        let (cc_h, fake_l) = self.cycle_graph(g, 1, x_h, mu_h, z_h, w, rng)?;
        let gan_l = self.gan_graph(g, 0, x_l, fake_l, w)?;
        let gan_h = self.gan_graph(g, 1, x_h, fake_h, w)?;
        let gen_loss = g.sum_scalars(&[vae_l, vae_h, cc_l, cc_h, gan_l.g_loss, gan_h.g_loss]);
        let terms = ObjectiveTerms {
            vae_l: value(g, vae_l),
            gan_l: -value(g, gan_l.d_loss),
            cc_l: value(g, cc_l),
            vae_h: value(g, vae_h),
            gan_h: -value(g, gan_h.d_loss),
            cc_h: value(g, cc_h),
        };
        Ok(JointForward { gen_loss, terms, fake_l, fake_h })
    }

    /// Discriminator loss of both domains on fixed fake batches.
    pub(crate) fn disc_step_graph(
        &self,
        g: &mut Graph<T>,
        x_l: Var,
        x_h: Var,
        fake_l: Var,
        fake_h: Var,
        w: &LossWeights,
    ) -> Result<Var> {
        let l = self.gan_graph(g, 0, x_l, fake_l, w)?;
        let h = self.gan_graph(g, 1, x_h, fake_h, w)?;
        Ok(g.sum_scalars(&[l.d_loss, h.d_loss]))
    }

    /// `λ1 KL(q(z|x) ‖ N(0, I)) + λ2 · L1(x, G(z))`.
    pub fn vae_loss(&self, domain: Domain, x: &Tensor<T>, w: &LossWeights, rng: Option<&mut StageRng>) -> Result<f64> {
        let slot = domain_slot(domain)?;
        self.check_input(x)?;
        let mut g = Graph::new(self.store());
        let xv = g.input(x.clone());
        let (loss, _, _) = self.vae_graph(&mut g, slot, xv, w, rng)?;
        Ok(value(&g, loss))
    }

    /// Adversarial terms for the discriminator of `domain`, judging `real`
    /// against already translated samples.
    pub fn gan_loss(&self, domain: Domain, real: &Tensor<T>, translated: &Tensor<T>, w: &LossWeights) -> Result<GanTerms> {
        let slot = domain_slot(domain)?;
        self.check_input(real)?;
        self.check_input(translated)?;
        let mut g = Graph::new(self.store());
        let r = g.input(real.clone());
        let f = g.input(translated.clone());
        let v = self.gan_graph(&mut g, slot, r, f, w)?;
        let d_loss = value(&g, v.d_loss);
        Ok(GanTerms { objective: -d_loss, d_loss, g_loss: value(&g, v.g_loss) })
    }

    /// Cycle term for `x` taken from `domain`: translate, re-encode, decode back.
    pub fn cycle_loss(&self, domain: Domain, x: &Tensor<T>, w: &LossWeights, mut rng: Option<&mut StageRng>) -> Result<f64> {
        let slot = domain_slot(domain)?;
        self.check_input(x)?;
        let mut g = Graph::new(self.store());
        let xv = g.input(x.clone());
        let mu = self.encode_graph(&mut g, slot, xv)?;
        let z = Self::sample_graph(&mut g, mu, rng.as_deref_mut())?;
        let (loss, _) = self.cycle_graph(&mut g, slot, xv, mu, z, w, rng)?;
        Ok(value(&g, loss))
    }

    /// Value of one deterministic objective term (codes are the posterior
    /// means). `x_l` and `x_h` are lesion and non-lesion batches.
    pub fn objective_value(&self, objective: Objective, x_l: &Tensor<T>, x_h: &Tensor<T>, w: &LossWeights) -> Result<f64> {
        self.check_input(x_l)?;
        self.check_input(x_h)?;
        let mut g = Graph::new(self.store());
        let loss = self.objective_graph(&mut g, objective, x_l, x_h, w)?;
        Ok(value(&g, loss))
    }

    /// Value and parameter gradients of one deterministic objective term.
    /// Parameters the term does not depend on are absent.
    pub fn objective_gradients(
        &self,
        objective: Objective,
        x_l: &Tensor<T>,
        x_h: &Tensor<T>,
        w: &LossWeights,
    ) -> Result<(f64, ParamGradients<T>)> {
        self.check_input(x_l)?;
        self.check_input(x_h)?;
        let mut g = Graph::new(self.store());
        let loss = self.objective_graph(&mut g, objective, x_l, x_h, w)?;
        let grads = g.backward(loss)?;
        let out = self.store().ids().filter_map(|id| grads.param(id).map(|t| (id, t.clone()))).collect();
        Ok((value(&g, loss), out))
    }

    fn objective_graph(&self, g: &mut Graph<T>, objective: Objective, x_l: &Tensor<T>, x_h: &Tensor<T>, w: &LossWeights) -> Result<Var> {
        let l = g.input(x_l.clone());
        let h = g.input(x_h.clone());
        let pick = |d: Domain| -> Result<(usize, Var, Var)> {
            let slot = domain_slot(d)?;
            Ok(if slot == 0 { (0, l, h) } else { (1, h, l) })
        };
        match objective {
            Objective::Vae(d) => {
                let (slot, x, _) = pick(d)?;
                Ok(self.vae_graph(g, slot, x, w, None)?.0)
            }
            Objective::Cycle(d) => {
                let (slot, x, _) = pick(d)?;
                let mu = self.encode_graph(g, slot, x)?;
                Ok(self.cycle_graph(g, slot, x, mu, mu, w, None)?.0)
            }
            Objective::GanGenerator(d) | Objective::GanDiscriminator(d) => {
                let (slot, real, other) = pick(d)?;
                let mu = self.encode_graph(g, 1 - slot, other)?;
                let fake = self.decode_graph(g, slot, mu)?;
                let v = self.gan_graph(g, slot, real, fake, w)?;
                Ok(if matches!(objective, Objective::GanGenerator(_)) { v.g_loss } else { v.d_loss })
            }
            Objective::Generator => Ok(self.joint_forward(g, l, h, w, None)?.gen_loss),
        }
    }

    pub fn total_objective(
        &self,
        x_l: &Tensor<T>,
        x_h: &Tensor<T>,
        w: &LossWeights,
        rng: Option<&mut StageRng>,
    ) -> Result<ObjectiveTerms> {
        self.check_input(x_l)?;
        self.check_input(x_h)?;
        let mut g = Graph::new(self.store());
        let l = g.input(x_l.clone());
        let h = g.input(x_h.clone());
        Ok(self.joint_forward(&mut g, l, h, w, rng)?.terms)
    }
}
