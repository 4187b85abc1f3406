//! The toy decoder-only transformer: configuration, checkpoints, the
//! straight-line forward pass, the tape version used for training, and LoRA.

pub mod checkpoint;
pub mod config;
pub mod graph;
pub mod infer;
pub mod lora;
pub mod optim;
pub mod train;

pub use checkpoint::{Checkpoint, MaskSet, Weight, CHECKPOINT_KIND};
pub use config::{names, Activation, ModelConfig, LAYER_NORM_EPS};
pub use infer::{check_tokens, forward_lm, forward_with, FfnProbe, ForwardOptions};
pub use lora::{lora_merge, LoraAdapter, LoraFactors};
pub use train::{lora_finetune, train_baseline, TrainHyper, TrainLog};
