use std::path::PathBuf;

use crate::data::spt::SptError;
use crate::mask::LossBreakdown;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at {node}: expected {expected:?}, got {actual:?}")]
    Shape {
        node: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("graph: {0}")]
    Graph(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("token id {id} at position {position} is out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange {
        id: usize,
        position: usize,
        vocab_size: usize,
    },

    #[error("sequence of {len} tokens exceeds context length {context_length}")]
    SequenceTooLong { len: usize, context_length: usize },

    #[error("corpus {} is empty after tokenization", .0.display())]
    EmptyCorpus(PathBuf),

    #[error("training diverged at step {step} (last finite loss {last_finite_loss})")]
    Diverged { step: usize, last_finite_loss: f64 },

    #[error("mask optimization hit a non-finite loss at iteration {iteration}")]
    MaskOptimizationAborted {
        iteration: usize,
        trace: Vec<LossBreakdown>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint is quantized; {0} requires f32 weights")]
    Quantized(String),

    #[error(transparent)]
    Spt(#[from] SptError),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
