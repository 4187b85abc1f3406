//! Structural extraction: pruned FFN neurons lose their up-projection row,
//! up-bias entry and down-projection column.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{forward_lm, names, Checkpoint, ModelConfig, Weight};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub kept: Vec<usize>,
    pub original_width: usize,
}

impl LayerPlan {
    pub fn new_width(&self) -> usize {
        self.kept.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub d_model: usize,
    pub layers: Vec<LayerPlan>,
    /// Total FFN edges `|E|`.
    pub edges_total: usize,
    /// Retained FFN edges `|E'|`.
    pub edges_kept: usize,
}

impl PrunePlan {
    pub fn kept_fraction(&self) -> f64 {
        if self.edges_total == 0 {
            return 1.0;
        }
        self.edges_kept as f64 / self.edges_total as f64
    }

    pub fn new_widths(&self) -> Vec<usize> {
        self.layers.iter().map(LayerPlan::new_width).collect()
    }

    /// Plan from binary masks over `config`'s FFN layers.
    pub fn from_masks(config: &ModelConfig, masks: &[Vec<f32>]) -> Result<Self> {
        if masks.len() != config.n_layers {
            return Err(Error::invalid(format!(
                "{} masks for {} layers",
                masks.len(),
                config.n_layers
            )));
        }
        let per = 2 * config.d_model;
        let mut layers = Vec::with_capacity(masks.len());
        let mut kept_neurons = 0;
        for (l, (m, &f)) in masks.iter().zip(&config.d_ffn).enumerate() {
            if m.len() != f {
                return Err(Error::Shape {
                    node: names::mask(l),
                    expected: vec![f],
                    actual: vec![m.len()],
                });
            }
            if let Some(v) = m.iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(Error::invalid(format!("mask of layer {l} holds non-binary value {v}")));
            }
            let kept: Vec<usize> = (0..f).filter(|&i| m[i] == 1.0).collect();
            kept_neurons += kept.len();
            layers.push(LayerPlan {
                kept,
                original_width: f,
            });
        }
        Ok(PrunePlan {
            d_model: config.d_model,
            layers,
            edges_total: config.total_ffn_neurons() * per,
            edges_kept: kept_neurons * per,
        })
    }

    fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let widths: Vec<usize> = self.layers.iter().map(|l| l.original_width).collect();
        if widths != config.d_ffn || self.d_model != config.d_model {
            return Err(Error::Shape {
                node: "prune plan".into(),
                expected: config.d_ffn.clone(),
                actual: widths,
            });
        }
        for (l, lp) in self.layers.iter().enumerate() {
            let ok = lp.kept.windows(2).all(|w| w[0] < w[1]) && lp.kept.iter().all(|&i| i < lp.original_width);
            if !ok {
                return Err(Error::invalid(format!(
                    "kept indices of layer {l} must be strictly increasing and below {}",
                    lp.original_width
                )));
            }
        }
        Ok(())
    }
}

/// Plan from the checkpoint's own masks.
pub fn plan(ckpt: &Checkpoint) -> Result<PrunePlan> {
    let masks = ckpt
        .masks()
        .ok_or_else(|| Error::invalid("checkpoint carries no masks to plan from"))?;
    PrunePlan::from_masks(ckpt.config(), masks)
}

fn select_rows(t: &Tensor<f32>, rows: &[usize]) -> Result<Tensor<f32>> {
    let cols = t.shape()[1..].iter().product::<usize>();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * cols..(r + 1) * cols]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(shape, data)
}

fn select_cols(t: &Tensor<f32>, cols: &[usize]) -> Result<Tensor<f32>> {
    let (r, c) = t.rows_cols();
    let mut data = Vec::with_capacity(r * cols.len());
    for i in 0..r {
        let row = &t.data()[i * c..(i + 1) * c];
        data.extend(cols.iter().map(|&j| row[j]));
    }
    Tensor::new(vec![r, cols.len()], data)
}

/// The physically smaller checkpoint. Masks are dropped.
pub fn extract(ckpt: &Checkpoint, plan: &PrunePlan) -> Result<Checkpoint> {
    if ckpt.is_quantized() {
        return Err(Error::Quantized("structural extraction".into()));
    }
    plan.check_against(ckpt.config())?;
    let mut config = ckpt.config().clone();
    config.d_ffn = plan.new_widths();
    let mut tensors: BTreeMap<String, Weight> = ckpt.tensors().clone();
    for (l, lp) in plan.layers.iter().enumerate() {
        let up = select_rows(ckpt.f32(&names::up(l))?, &lp.kept)?;
        let bias = select_rows(ckpt.f32(&names::up_bias(l))?, &lp.kept)?;
        let down = select_cols(ckpt.f32(&names::down(l))?, &lp.kept)?;
        tensors.insert(names::up(l), Weight::F32(up));
        tensors.insert(names::up_bias(l), Weight::F32(bias));
        tensors.insert(names::down(l), Weight::F32(down));
    }
    Checkpoint::new(config, tensors, None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub prompts: usize,
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub const EQUIVALENCE_TOLERANCE: f64 = 1e-5;

/// Compares the masked original's logits with the pruned model's.
pub fn verify<P: AsRef<[usize]>>(original_masked: &Checkpoint, pruned: &Checkpoint, prompts: &[P]) -> Result<EquivalenceReport> {
    if prompts.is_empty() {
        return Err(Error::invalid("verification needs at least one prompt"));
    }
    let (a, b) = (original_masked.config(), pruned.config());
    if a.vocab_size != b.vocab_size || a.n_layers != b.n_layers || a.d_model != b.d_model || a.n_heads != b.n_heads {
        return Err(Error::invalid("original and pruned checkpoints have incompatible configs"));
    }
    let mut max_abs_diff = 0.0f64;
    for p in prompts {
        let x = forward_lm(original_masked, p.as_ref(), original_masked.masks())?;
        let y = forward_lm(pruned, p.as_ref(), pruned.masks())?;
        max_abs_diff = max_abs_diff.max(x.max_abs_diff(&y));
    }
    Ok(EquivalenceReport {
        prompts: prompts.len(),
        max_abs_diff,
        tolerance: EQUIVALENCE_TOLERANCE,
        passed: max_abs_diff <= EQUIVALENCE_TOLERANCE,
    })
}
