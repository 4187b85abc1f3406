//! Stage-per-subcommand pipeline with file handoff between stages.

pub mod config;
pub mod manifest;
pub mod stages;

use std::path::PathBuf;

pub use config::{ConfigError, RunConfig};
pub use manifest::{Artifact, Manifest};
pub use stages::{Run, Stage};

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING_ARTIFACT: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "SALPRUNE_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing artifact {}; produce it with `{producer}` or pass --ckpt", path.display())]
    MissingArtifact { path: PathBuf, producer: &'static str },
    #[error("prune equivalence check failed: max logit difference {max_abs_diff:e} exceeds {tolerance:e}")]
    Equivalence { max_abs_diff: f64, tolerance: f64 },
    #[error(transparent)]
    Core(#[from] Error),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => EXIT_CONFIG,
            PipelineError::MissingArtifact { .. } => EXIT_MISSING_ARTIFACT,
            PipelineError::Equivalence { .. } => EXIT_NUMERICAL,
            PipelineError::Core(e) => match e {
                Error::Diverged { .. } | Error::MaskOptimizationAborted { .. } | Error::NonFinite(_) => EXIT_NUMERICAL,
                _ => EXIT_OTHER,
            },
        }
    }
}

pub type PipelineResult<T> = std::result::Result<T, PipelineError>;
