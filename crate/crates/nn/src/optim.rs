use serde::{Deserialize, Serialize};

use crate::graph::Gradients;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam over a fixed subset of a store's parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
}

impl Adam {
    pub fn new<T: Scalar>(store: &ParamStore<T>, ids: &[ParamId], config: AdamConfig) -> Self {
        let m = ids.iter().map(|&id| vec![0.0; store.get(id).len()]).collect::<Vec<_>>();
        Self { config, ids: ids.to_vec(), v: m.clone(), m, steps: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update. Parameters without a gradient in `grads` are left untouched.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.steps += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        for (slot, &id) in self.ids.iter().enumerate() {
            let Some(g) = grads.param(id) else { continue };
            let w = store.get_mut(id);
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for (i, (wv, gv)) in w.data_mut().iter_mut().zip(g.data()).enumerate() {
                let wf = wv.as_f64();
                let gf = gv.as_f64() + c.weight_decay * wf;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gf;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gf * gf;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *wv = T::lit(wf - c.lr * mhat / (vhat.sqrt() + c.eps));
            }
        }
    }
}
