//! Baseline training and LoRA fine-tuning on random windows of a corpus.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, Weight};
use super::config::ModelConfig;
use super::graph::{build_lm, lora_a, lora_b, tape_tensors, LmBatch, LmGraphOptions, Trainable};
use super::lora::{LoraAdapter, LoraFactors};
use super::optim::{clip_global_norm, Adam};
use crate::autodiff::{Bindings, Graph, Tensor};
use crate::data::TokenStream;
use crate::error::{Error, Result};
use crate::rng::substream;

/// Missing fields in JSON take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub steps: usize,
    pub batch: usize,
    pub seq: usize,
    pub lr: f32,
    /// Linear warmup length; afterwards the step size follows a cosine decay
    /// to `lr · min_lr_ratio` at the final step.
    pub warmup: usize,
    pub min_lr_ratio: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub grad_clip: f32,
    pub min_tokens: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            steps: 600,
            batch: 8,
            seq: 64,
            lr: 3e-3,
            warmup: 30,
            min_lr_ratio: 0.1,
            beta1: 0.9,
            beta2: 0.99,
            grad_clip: 1.0,
            min_tokens: 1024,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.seq == 0 {
            return Err(Error::invalid("batch and seq must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("lr must be positive"));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::invalid("min_lr_ratio must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f32 {
        if step < self.warmup {
            return self.lr * (step + 1) as f32 / self.warmup as f32;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1);
        let t = ((step - self.warmup) as f32 / span as f32).min(1.0);
        let floor = self.lr * self.min_lr_ratio;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f32::consts::PI * t).cos())
    }
}

/// Per-step mean cross-entropy.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f32>,
}

fn check_corpus(corpus: &TokenStream, hyper: &TrainHyper) -> Result<()> {
    hyper.validate()?;
    let train = corpus.train();
    if train.is_empty() {
        return Err(Error::EmptyCorpus(corpus.source().to_path_buf()));
    }
    let need = hyper.min_tokens.max(hyper.seq + 1);
    if train.len() < need {
        return Err(Error::invalid(format!(
            "training split of {} has {} tokens, need at least {need}",
            corpus.source().display(),
            train.len()
        )));
    }
    Ok(())
}

fn sample_batch<R: Rng>(train: &[usize], hyper: &TrainHyper, rng: &mut R) -> Result<LmBatch> {
    let span = hyper.seq + 1;
    let windows: Vec<&[usize]> = (0..hyper.batch)
        .map(|_| {
            let start = rng.random_range(0..=train.len() - span);
            &train[start..start + span]
        })
        .collect();
    LmBatch::from_windows(&windows)
}

/// Shared Adam loop over the parameters named in `params`.
fn run<F>(
    config: &ModelConfig,
    corpus: &TokenStream,
    hyper: &TrainHyper,
    stream: &str,
    opts: &LmGraphOptions<'_>,
    fixed: &BTreeMap<String, Tensor<f32>>,
    params: &mut BTreeMap<String, Tensor<f32>>,
    mut on_step: F,
) -> Result<TrainLog>
where
    F: FnMut(usize, f32),
{
    let mut g = Graph::<f32>::new();
    let lm = build_lm(&mut g, config, opts)?;
    let mut rng = substream(hyper.seed, stream);
    let mut adam = Adam::new(hyper.beta1, hyper.beta2, 1e-8);
    let mut log = TrainLog::default();
    let mut last_finite = f64::NAN;
    for step in 0..hyper.steps {
        let batch = sample_batch(corpus.train(), hyper, &mut rng)?;
        let loss = {
            let mut b = Bindings::new();
            for (k, v) in fixed.iter().chain(params.iter()) {
                b.tensor(k.clone(), v);
            }
            batch.bind(&mut b);
            g.forward(&b)?;
            g.scalar(lm.loss)?
        };
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                last_finite_loss: last_finite,
            });
        }
        last_finite = loss as f64;
        log.losses.push(loss);
        let mut grads = g.backward(lm.loss)?;
        grads.retain(|k, _| params.contains_key(k));
        clip_global_norm(&mut grads, hyper.grad_clip);
        if grads.values().any(|t| !t.is_finite()) {
            return Err(Error::Diverged {
                step,
                last_finite_loss: last_finite,
            });
        }
        adam.update(params, &grads, hyper.lr_at(step));
        on_step(step, loss);
    }
    Ok(log)
}

/// Trains a fresh model. Reproducible for a fixed `hyper.seed`.
pub fn train_baseline(config: &ModelConfig, corpus: &TokenStream, hyper: &TrainHyper) -> Result<Checkpoint> {
    train_baseline_logged(config, corpus, hyper).map(|(c, _)| c)
}

pub fn train_baseline_logged(
    config: &ModelConfig,
    corpus: &TokenStream,
    hyper: &TrainHyper,
) -> Result<(Checkpoint, TrainLog)> {
    check_corpus(corpus, hyper)?;
    let init = Checkpoint::init(config.clone(), hyper.seed)?;
    let mut params = init.f32_tensors()?;
    let opts = LmGraphOptions {
        batch: hyper.batch,
        seq: hyper.seq,
        trainable: Trainable::Base,
        adapter: None,
        masks: None,
    };
    let every = (hyper.steps / 10).max(1);
    let log = run(
        config,
        corpus,
        hyper,
        "train",
        &opts,
        &BTreeMap::new(),
        &mut params,
        |step, loss| {
            if step % every == 0 || step + 1 == hyper.steps {
                log::info!("train step {step}: loss {loss:.4}");
            }
        },
    )?;
    let tensors = params.into_iter().map(|(k, v)| (k, Weight::F32(v))).collect();
    Ok((Checkpoint::new(config.clone(), tensors, None)?, log))
}

/// Trains a fresh LoRA adapter against frozen base weights.
pub fn lora_finetune(
    ckpt: &Checkpoint,
    corpus: &TokenStream,
    rank: usize,
    alpha: f32,
    hyper: &TrainHyper,
) -> Result<LoraAdapter> {
    lora_finetune_logged(ckpt, corpus, rank, alpha, hyper).map(|(a, _)| a)
}

pub fn lora_finetune_logged(
    ckpt: &Checkpoint,
    corpus: &TokenStream,
    rank: usize,
    alpha: f32,
    hyper: &TrainHyper,
) -> Result<(LoraAdapter, TrainLog)> {
    if ckpt.is_quantized() {
        return Err(Error::Quantized("LoRA fine-tuning".into()));
    }
    if ckpt.masks().is_some() {
        return Err(Error::invalid(
            "fine-tune a structurally pruned checkpoint, not a masked one",
        ));
    }
    let mut adapter = LoraAdapter::new(ckpt, rank, alpha, hyper.seed)?;
    if hyper.steps == 0 {
        return Ok((adapter, TrainLog::default()));
    }
    check_corpus(corpus, hyper)?;
    let fixed = ckpt.f32_tensors()?;
    let mut params = tape_tensors::<f32>(&BTreeMap::new(), Some(&adapter));
    let opts = LmGraphOptions {
        batch: hyper.batch,
        seq: hyper.seq,
        trainable: Trainable::Adapter,
        adapter: Some(&adapter),
        masks: None,
    };
    let every = (hyper.steps / 5).max(1);
    let log = run(
        ckpt.config(),
        corpus,
        hyper,
        "finetune",
        &opts,
        &fixed,
        &mut params,
        |step, loss| {
            if step % every == 0 || step + 1 == hyper.steps {
                log::info!("finetune step {step}: loss {loss:.4}");
            }
        },
    )?;
    for (name, f) in adapter.targets.iter_mut() {
        *f = LoraFactors {
            a: params.remove(&lora_a(name)).expect("trained factor"),
            b: params.remove(&lora_b(name)).expect("trained factor"),
        };
    }
    Ok((adapter, log))
}
