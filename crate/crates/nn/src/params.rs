use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::NnError;

/// Handle to one parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Owns every trainable tensor of a model. Sub-networks refer to their
/// tensors by [`ParamId`], so two networks holding the same id share storage.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.entries.push((name.into(), value));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn snapshot(&self) -> StoreSnapshot {
        StoreSnapshot {
            entries: self
                .entries
                .iter()
                .map(|(name, t)| SnapshotEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    values: t.data().iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
        }
    }

    /// Overwrite all tensors from a snapshot with identical names and shapes.
    pub fn restore(&mut self, snap: &StoreSnapshot) -> Result<(), NnError> {
        if snap.entries.len() != self.entries.len() {
            return Err(NnError::Checkpoint(format!(
                "snapshot has {} tensors, model has {}",
                snap.entries.len(),
                self.entries.len()
            )));
        }
        for ((name, t), e) in self.entries.iter_mut().zip(&snap.entries) {
            if *name != e.name || t.shape() != e.shape.as_slice() {
                return Err(NnError::Checkpoint(format!(
                    "tensor {} {:?} does not match snapshot entry {} {:?}",
                    name,
                    t.shape(),
                    e.name,
                    e.shape
                )));
            }
            for (dst, &v) in t.data_mut().iter_mut().zip(&e.values) {
                *dst = T::lit(v);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Serializable copy of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreSnapshot {
    pub entries: Vec<SnapshotEntry>,
}

/// He-uniform initialisation: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn he_uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("shape product")
}
