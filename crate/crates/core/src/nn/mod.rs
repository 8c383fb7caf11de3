//! Minimal neural-network core: dense f32 tensors, a reverse-mode autodiff
//! tape, layer builders, Adam, and a binary checkpoint format.
//!
//! Values are stored in 32-bit floats; every reduction (matrix products,
//! sums, softmax normalizers) accumulates in 64 bits. The tape can also be
//! replayed entirely in f64 (`Graph::eval_f64`), which is what the
//! finite-difference gradient checks compare against.

mod checkpoint;
mod graph;
mod layers;
mod net;
mod optim;
mod tensor;

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, CheckpointMeta};
pub use graph::{GradMap, Graph, Var};
pub use layers::{
    dropout, gru_step, linear, multihead_attention, AttnVars, GruVars,
};
pub use net::ModelGraph;
pub use optim::{adam_step, AdamParams, AdamState};
pub use tensor::{ParamStore, Tensor};

use crate::rng::RngStream;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("gradient key `{0}` has no matching parameter")]
    OrphanGradient(String),
    #[error("gradient for `{name}` has {got} elements, parameter has {want}")]
    GradientSize { name: String, got: usize, want: usize },
    #[error("backward target must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("attention heads ({heads}) must divide the projection dim ({dim})")]
    BadHeads { heads: usize, dim: usize },
    #[error("dropout rate {0} is outside [0, 1)")]
    BadDropoutRate(f32),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

/// Inserts a `[rows, cols]` weight with uniform Xavier/Glorot init.
///
/// Draws come from a stream split off by parameter name, so initialization
/// does not depend on insertion order.
pub fn init_weight(
    store: &mut ParamStore,
    name: &str,
    rows: usize,
    cols: usize,
    rng: &RngStream,
) -> Result<(), NnError> {
    let mut s = rng.split_str(name);
    let limit = (6.0 / (rows + cols) as f64).sqrt() as f32;
    let data = (0..rows * cols).map(|_| s.uniform(-limit, limit)).collect();
    store.insert(name, Tensor::from_vec(&[rows, cols], data))
}

/// Inserts a zero-filled `[1, cols]` bias.
pub fn init_bias(store: &mut ParamStore, name: &str, cols: usize) -> Result<(), NnError> {
    store.insert(name, Tensor::zeros(&[1, cols]))
}
