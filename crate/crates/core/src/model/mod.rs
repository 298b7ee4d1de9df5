//! Pre-norm transformer encoder/decoder with sinusoidal positions and a
//! (by default tied) output projection.

mod config;
mod network;
mod params;

pub use config::ModelConfig;
pub use network::{decode_teacher_forced, encode, extract_target, lm_head, positional_encoding, SeqView};
pub use params::{
    AttentionVars, BoundModel, DecoderLayerVars, EncoderLayerVars, FeedForwardVars, ModelParams, NormVars,
};

use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("sequence of length {len} exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("sample {sample} has no target positions")]
    EmptyTarget { sample: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
