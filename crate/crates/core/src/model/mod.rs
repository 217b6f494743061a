//! The sequence embedding network and its persisted state.

pub mod checkpoint;
mod network;
mod spec;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointState, OptimizerState};
pub use network::{Batch, BatchBuilder, ForwardPass, FrameKey, Mode, Model};
pub use spec::{ConvLayerSpec, InputMode, ModelSpec};

use crate::nn::Real;

/// Output of the embedding network for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn from_reals<T: Real>(v: &[T]) -> Self {
        Self(v.iter().map(|x| x.f64()).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}
