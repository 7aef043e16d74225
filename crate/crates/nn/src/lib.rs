//! Minimal tensor and autodiff toolkit: NCHW tensors, im2col convolutions,
//! a recording [`Graph`] with reverse-mode gradients, and Adam.

pub mod conv;
pub mod graph;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use conv::ConvGeom;
pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{he_uniform, ParamId, ParamStore, SnapshotEntry, StoreSnapshot};
pub use scalar::Scalar;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}
