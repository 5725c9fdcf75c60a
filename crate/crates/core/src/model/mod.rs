//! The dual-task network: shared encoders, motion-/audio-attentive fusion,
//! speaker-aware gating, cross-modal attention and the two decoders.

mod checkpoint;
mod config;
mod network;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointMeta, Precision,
    CHECKPOINT_VERSION,
};
pub use config::ModelConfig;
pub use network::{attention_head, multi_head, DualTalker, ForwardOutputs, LAYER_NORM_EPS};

use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

use crate::data::DataError;
use crate::diffcore::DiffError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("speaker {speaker} out of range ({speakers} speakers)")]
    SpeakerOutOfRange { speaker: usize, speakers: usize },
    #[error("sequence of {frames} frames outside 1..={max}")]
    TooLong { frames: usize, max: usize },
    #[error("width mismatch: expected {expected}, found {found}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("length mismatch: expected {expected} frames, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Which of the two tasks a block serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Speech to motion.
    Primal,
    /// Motion to speech.
    Dual,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Primal => "primal",
            Direction::Dual => "dual",
        })
    }
}

#[cfg(test)]
mod tests;
