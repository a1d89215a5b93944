//! Bilinear latent dynamics with history-conditioned operators.
//!
//! A state is lifted by an MLP encoder. A depthwise convolution over the
//! lookback sequence of latent states and controls, followed by separate
//! MLP heads, produces per-step mode timescales, a continuous input matrix
//! and a decoder. The drift is `diag(a) + Σ_j u_j G_j` with `G_j = L_j R_jᵀ`,
//! discretized by the split `exp(P(u)T)·exp(diag(a ⊙ δ))`.

mod checkpoint;
mod forward;
mod loss;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use forward::{
    discretize, encode, encode_rows, generate_operators, rollout, spectral_penalty, Coupling, DiscreteOperators,
    LieTrotterStep, OperatorBundle,
};
pub use loss::{batch_loss_and_grad, window_loss, window_loss_and_grad, window_predictions, BatchLoss, NormalizedWindow};
pub use params::{ModelConfig, ModelKind, ModelParams, TensorId};

use thiserror::Error;

use crate::NumericsError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("not a checkpoint file: {0}")]
    Format(String),
    #[error("corrupt checkpoint: {0}")]
    Integrity(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
