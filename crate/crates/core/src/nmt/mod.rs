//! A small transformer encoder-decoder with tied embeddings, a weighted
//! cross-entropy training objective with a phased weight schedule, and
//! beam-search decoding.
//!
//! The numeric core is generic over [`Real`] so the same code runs in `f32`
//! for training and in `f64` for finite-difference gradient verification.

mod beam;
mod checkpoint;
mod layers;
mod loss;
mod model;
#[cfg(test)]
mod tests;
mod train;
mod vocab;

pub use beam::{beam_search, greedy_decode_batch, DecodeSpecials};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointData, CheckpointError};
pub use layers::{Param, SeqLayout};
pub use loss::{cross_entropy, wce_from_logits, wce_loss, PROB_FLOOR};
pub use model::{Batch, ForwardPass, ModelConfig, Seq2SeqModel};
pub use train::{
    train, EpochLog, OptimizerKind, TrainConfig, TrainExample, TrainLog, ValidationMetric,
    ValidationSet,
};
pub use vocab::Vocabulary;

use thiserror::Error;

/// Floating-point scalar the model can run in.
pub trait Real:
    ndarray::LinalgScalar
    + num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Error, Debug)]
pub enum NmtError {
    #[error("token id {id} is out of range for vocabulary of size {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },
    #[error("invalid model or training configuration: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}
