//! Saliency-driven structured pruning for small decoder-only transformers.
//!
//! The pipeline: train a toy baseline, score FFN neurons on a calibration
//! corpus, learn per-layer thresholds under an edge budget, physically
//! remove the pruned neurons, recover with LoRA, quantize to Q4_0, and
//! evaluate.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod mask;
pub mod model;
pub mod pipeline;
pub mod prune;
pub mod quant;
pub mod rng;
pub mod saliency;

pub use error::{Error, Result};
