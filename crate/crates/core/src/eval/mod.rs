//! Perplexity, multiple-choice accuracy, throughput, the exhaustive mask
//! oracle and the pruning-rate sweep.

pub mod mcq;
pub mod oracle;
pub mod perplexity;
pub mod report;
pub mod sweep;
pub mod throughput;

pub use mcq::{mcq_accuracy, wilson_interval, McqItem, McqResult, McqTask};
pub use oracle::{oracle_masks, MaskEvaluator, OracleReport};
pub use perplexity::{nll_sum, perplexity, NllSum};

pub use throughput::{throughput, ThroughputReport};
pub use report::{evaluate, EvalContext, EvalOptions, EvalReport};
pub use sweep::{sweep, LoraSpec, SweepDomain, SweepRow, SweepSpec};
