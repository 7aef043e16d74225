//! Generative lesion augmentation for imbalanced binary image classification.

pub mod blending;
pub mod classifier;
pub mod dataio;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod patching;
pub mod pseudolabel;
pub mod seed;
pub mod tensors;
pub mod translation;

pub use error::{Error, Result};
