//! The eight model variants and their shared classifier head.
//!
//! Every variant projects 768-d features to `d_model`, runs a per-modality
//! transformer encoder, mean-pools over tokens, fuses, and classifies. The
//! cross-transformer kinds insert one (`CT`) or two (`SNIFR`) bidirectional
//! cross-attention stages before pooling.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{FusionKind, ModelConfig};
pub use model::{Batch, ForwardCtx, ForwardOutput, GraphOutput, Inputs, Modality, Model};

use crate::diff_engine::DiffError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("bad model input: {0}")]
    Input(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
