//! Learns one pruning threshold per layer by gradient descent on
//! `α · TaskLoss + (1 − α) · ResourceLoss` through temperature-scaled
//! logistic soft masks, then reads out binary masks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::activation::sigmoid;
use crate::autodiff::gradcheck::{Feed, GraphBuilder};
use crate::autodiff::{Bindings, Graph, NodeId, Real, Tensor};
use crate::data::CalibrationSet;
use crate::error::{Error, Result};
use crate::model::graph::{build_lm, tape_tensors, LmBatch, LmGraph, LmGraphOptions, Trainable, POSITIONS, TARGETS, TOKENS};
use crate::model::optim::Adam;
use crate::model::{names, Checkpoint, MaskSet, ModelConfig};
use crate::saliency::SaliencyScores;

pub const INV_TEMPERATURE: &str = "mask.inv_temperature";

pub fn scores_input(layer: usize) -> String {
    format!("mask.scores.{layer}")
}

pub fn threshold_param(layer: usize) -> String {
    format!("mask.tau.{layer}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub alpha: f64,
    pub target_fraction: f64,
    pub iterations: usize,
    /// Adam step size for the thresholds (in normalized score units).
    pub step_size: f64,
    pub temperature_start: f64,
    pub temperature_end: f64,
    /// Calibration windows used by the task loss each iteration.
    pub batch: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            alpha: 0.5,
            target_fraction: 0.5,
            iterations: 150,
            step_size: 0.05,
            temperature_start: 1.0,
            temperature_end: 0.05,
            batch: 8,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        check_target(self.target_fraction)?;
        if !(self.temperature_start > 0.0 && self.temperature_end > 0.0) {
            return Err(Error::invalid("temperatures must be positive"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid("step_size must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("mask batch must be at least 1"));
        }
        Ok(())
    }

    /// Geometric annealing from `temperature_start` to `temperature_end`.
    pub fn temperature_at(&self, iteration: usize) -> f64 {
        if self.iterations <= 1 {
            return self.temperature_end;
        }
        let t = iteration as f64 / (self.iterations - 1) as f64;
        self.temperature_start * (self.temperature_end / self.temperature_start).powf(t)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

fn check_target(target: f64) -> Result<()> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::invalid(format!("target fraction {target} outside (0, 1]")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskState {
    pub thresholds: Vec<f64>,
    pub temperature: f64,
    pub soft: Vec<Vec<f64>>,
    pub binary: MaskSet,
    pub alpha: f64,
    pub target_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub iteration: usize,
    pub temperature: f64,
    pub task_loss: f64,
    pub resource_loss: f64,
    pub combined: f64,
    /// `|E'|/|E|` of the masks the losses were computed with.
    pub kept_fraction: f64,
    /// `|E'|/|E|` of the binary read-out at this iteration.
    pub binary_kept_fraction: f64,
    /// Masked over baseline calibration cross-entropy.
    pub perf_ratio: f64,
}

/// `m = logistic((s − τ) / T)` per neuron.
pub fn soft_mask(scores: &SaliencyScores, thresholds: &[f64], temperature: f64) -> Result<Vec<Vec<f64>>> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature {temperature} must be positive")));
    }
    if thresholds.len() != scores.layers.len() {
        return Err(Error::invalid(format!(
            "{} thresholds for {} layers",
            thresholds.len(),
            scores.layers.len()
        )));
    }
    Ok(scores
        .layers
        .iter()
        .zip(thresholds)
        .map(|(l, &tau)| l.score.iter().map(|&s| sigmoid((s - tau) / temperature)).collect())
        .collect())
}

/// `M = 1` iff `s ≥ τ` (equivalently `m ≥ 0.5`); a tie keeps the neuron.
pub fn binarize(scores: &SaliencyScores, thresholds: &[f64]) -> MaskSet {
    scores
        .layers
        .iter()
        .zip(thresholds)
        .map(|(l, &tau)| l.score.iter().map(|&s| if s >= tau { 1.0 } else { 0.0 }).collect())
        .collect()
}

impl MaskState {
    pub fn new(scores: &SaliencyScores, thresholds: Vec<f64>, temperature: f64, alpha: f64, target: f64) -> Result<Self> {
        check_alpha(alpha)?;
        check_target(target)?;
        let soft = soft_mask(scores, &thresholds, temperature)?;
        let binary = binarize(scores, &thresholds);
        Ok(MaskState {
            thresholds,
            temperature,
            soft,
            binary,
            alpha,
            target_fraction: target,
        })
    }

    /// Re-derives the binary masks from the current thresholds.
    pub fn binarize(&mut self, scores: &SaliencyScores) -> &MaskSet {
        self.binary = binarize(scores, &self.thresholds);
        &self.binary
    }
}

/// Retained FFN edges over total FFN edges; every hidden neuron carries
/// `2 · d_model` edges. Works for soft or binary masks.
pub fn kept_fraction<V: Copy + Into<f64>>(config: &ModelConfig, masks: &[Vec<V>]) -> Result<f64> {
    let total = config.ffn_edges();
    if total == 0 {
        return Err(Error::invalid("model has no FFN neurons"));
    }
    let per = 2.0 * config.d_model as f64;
    let kept: f64 = masks.iter().flatten().map(|&m| m.into() * per).sum();
    Ok(kept / total as f64)
}

/// `(kept − target)²`.
pub fn resource_loss(kept_fraction: f64, target: f64) -> Result<f64> {
    check_target(target)?;
    if !(0.0..=1.0).contains(&kept_fraction) {
        return Err(Error::invalid(format!("kept fraction {kept_fraction} outside [0, 1]")));
    }
    let d = kept_fraction - target;
    Ok(d * d)
}

/// Exact convex combination.
pub fn combined_loss(task: f64, resource: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha * task + (1.0 - alpha) * resource)
}

/// Mean next-token cross-entropy of the batch under optional masks.
pub fn batch_cross_entropy<V: Copy + Into<f64>>(
    ckpt: &Checkpoint,
    batch: &LmBatch,
    masks: Option<&[Vec<V>]>,
) -> Result<f64> {
    if ckpt.is_quantized() {
        return Err(Error::Quantized("cross-entropy on the tape".into()));
    }
    let cfg = ckpt.config();
    let mut g = Graph::<f32>::new();
    let mask_nodes: Option<Vec<NodeId>> = match masks {
        Some(_) => Some(
            cfg.d_ffn
                .iter()
                .enumerate()
                .map(|(l, &f)| g.input(names::mask(l), &[f]))
                .collect::<Result<_>>()?,
        ),
        None => None,
    };
    let lm = build_lm(
        &mut g,
        cfg,
        &LmGraphOptions {
            batch: batch.batch,
            seq: batch.seq,
            trainable: Trainable::Frozen,
            adapter: None,
            masks: mask_nodes.as_deref(),
        },
    )?;
    let weights = ckpt.f32_tensors()?;
    let mask_tensors: Vec<Tensor<f32>> = match masks {
        Some(m) => m
            .iter()
            .map(|v| Tensor::new(vec![v.len()], v.iter().map(|&x| x.into() as f32).collect()))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let mut b = Bindings::new();
    for (k, v) in &weights {
        b.tensor(k.clone(), v);
    }
    for (l, t) in mask_tensors.iter().enumerate() {
        b.tensor(names::mask(l), t);
    }
    batch.bind(&mut b);
    g.forward(&b)?;
    Ok(g.scalar(lm.loss)? as f64)
}

/// `(masked_ce / baseline_ce)²`.
pub fn task_loss<V: Copy + Into<f64>>(
    ckpt: &Checkpoint,
    masks: &[Vec<V>],
    batch: &LmBatch,
    baseline_loss: f64,
) -> Result<f64> {
    if !(baseline_loss > 0.0) {
        return Err(Error::invalid(format!("baseline loss {baseline_loss} must be positive")));
    }
    let ce = batch_cross_entropy(ckpt, batch, Some(masks))?;
    let r = ce / baseline_loss;
    Ok(r * r)
}

/// How the objective graph obtains its masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSource {
    /// Soft masks from fixed scores and learnable per-layer thresholds.
    Thresholds,
    /// Masks are themselves differentiable inputs named like `layers.{l}.ffn.mask`.
    Direct,
}

pub struct ObjectiveGraph {
    pub lm: LmGraph,
    pub masks: Vec<NodeId>,
    pub task: NodeId,
    pub resource: NodeId,
    pub kept: NodeId,
    pub combined: NodeId,
}

/// The combined loss as a tape, generic over precision so it can be
/// finite-difference checked.
#[derive(Clone, Debug)]
pub struct Objective {
    pub config: ModelConfig,
    pub batch: usize,
    pub seq: usize,
    pub baseline_ce: f64,
    pub alpha: f64,
    pub target_fraction: f64,
    pub source: MaskSource,
}

impl Objective {
    pub fn build_graph<R: Real>(&self, g: &mut Graph<R>) -> Result<ObjectiveGraph> {
        check_alpha(self.alpha)?;
        check_target(self.target_fraction)?;
        if !(self.baseline_ce > 0.0) {
            return Err(Error::invalid("baseline cross-entropy must be positive"));
        }
        let cfg = &self.config;
        let total_edges = cfg.ffn_edges();
        if total_edges == 0 {
            return Err(Error::invalid("model has no FFN neurons"));
        }
        let mut masks = Vec::with_capacity(cfg.n_layers);
        match self.source {
            MaskSource::Thresholds => {
                let inv_t = g.input(INV_TEMPERATURE, &[1])?;
                for (l, &f) in cfg.d_ffn.iter().enumerate() {
                    let s = g.input(scores_input(l), &[f])?;
                    let tau = g.param(threshold_param(l), &[1])?;
                    let neg = g.scale(tau, -1.0)?;
                    let diff = g.add_scalar(s, neg)?;
                    let z = g.mul_scalar(diff, inv_t)?;
                    masks.push(g.sigmoid(z)?);
                }
            }
            MaskSource::Direct => {
                for (l, &f) in cfg.d_ffn.iter().enumerate() {
                    masks.push(g.param(names::mask(l), &[f])?);
                }
            }
        }
        let lm = build_lm(
            g,
            cfg,
            &LmGraphOptions {
                batch: self.batch,
                seq: self.seq,
                trainable: Trainable::Frozen,
                adapter: None,
                masks: Some(&masks),
            },
        )?;
        let ratio = g.scale(lm.loss, 1.0 / self.baseline_ce)?;
        let task = g.square(ratio)?;

        let per_edge = 2.0 * cfg.d_model as f64 / total_edges as f64;
        let mut kept: Option<NodeId> = None;
        for (l, &m) in masks.iter().enumerate() {
            if cfg.d_ffn[l] == 0 {
                continue;
            }
            let s = g.sum(m)?;
            kept = Some(match kept {
                None => s,
                Some(acc) => g.add(acc, s)?,
            });
        }
        let kept = g.scale(kept.expect("at least one non-empty layer"), per_edge)?;
        let gap = g.affine(kept, 1.0, -self.target_fraction)?;
        let resource = g.square(gap)?;
        let a = g.scale(task, self.alpha)?;
        let b = g.scale(resource, 1.0 - self.alpha)?;
        let combined = g.add(a, b)?;
        Ok(ObjectiveGraph {
            lm,
            masks,
            task,
            resource,
            kept,
            combined,
        })
    }

    /// Inputs for a finite-difference check of this objective.
    pub fn feed(&self, ckpt: &Checkpoint, batch: &LmBatch, scores: &SaliencyScores, thresholds: &[f64], temperature: f64) -> Result<Feed> {
        let mut feed = Feed::new()
            .index(TOKENS, batch.tokens.clone())
            .index(POSITIONS, batch.positions.clone())
            .index(TARGETS, batch.targets.clone());
        for (k, v) in tape_tensors::<f64>(&ckpt.f32_tensors()?, None) {
            feed = feed.real(&k, v);
        }
        match self.source {
            MaskSource::Thresholds => {
                feed = feed.real(INV_TEMPERATURE, Tensor::scalar(1.0 / temperature));
                for (l, layer) in scores.layers.iter().enumerate() {
                    feed = feed
                        .real(&scores_input(l), Tensor::new(vec![layer.score.len()], layer.score.clone())?)
                        .real(&threshold_param(l), Tensor::scalar(thresholds[l]));
                }
            }
            MaskSource::Direct => {
                let soft = soft_mask(scores, thresholds, temperature)?;
                for (l, m) in soft.into_iter().enumerate() {
                    feed = feed.real(&names::mask(l), Tensor::new(vec![m.len()], m)?);
                }
            }
        }
        Ok(feed)
    }
}

/// Combined loss as the scalar output.
impl GraphBuilder for Objective {
    fn build<R: Real>(&self, g: &mut Graph<R>) -> Result<NodeId> {
        Ok(self.build_graph(g)?.combined)
    }
}

/// Task loss alone, with masks as direct inputs.
pub struct TaskObjective(pub Objective);

impl GraphBuilder for TaskObjective {
    fn build<R: Real>(&self, g: &mut Graph<R>) -> Result<NodeId> {
        let obj = Objective {
            source: MaskSource::Direct,
            ..self.0.clone()
        };
        Ok(obj.build_graph(g)?.task)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "message")]
pub enum OptimizeStatus {
    Converged,
    Warning(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeResult {
    pub state: MaskState,
    pub trace: Vec<LossBreakdown>,
    /// Losses of the final binary masks.
    pub final_breakdown: LossBreakdown,
    /// Realized `|E'|/|E|` of the final binary masks.
    pub kept_fraction: f64,
    pub status: OptimizeStatus,
}

/// Median of each layer's scores (lower median for even counts).
pub fn median_thresholds(scores: &SaliencyScores) -> Vec<f64> {
    scores
        .layers
        .iter()
        .map(|l| {
            if l.score.is_empty() {
                return 0.0;
            }
            let mut s = l.score.clone();
            s.sort_by(f64::total_cmp);
            let n = s.len();
            if n % 2 == 1 {
                s[n / 2]
            } else {
                0.5 * (s[n / 2 - 1] + s[n / 2])
            }
        })
        .collect()
}

/// Runs the annealed threshold optimization. `scores` should be normalized.
pub fn optimize(
    ckpt: &Checkpoint,
    scores: &SaliencyScores,
    calibration: &CalibrationSet,
    config: &MaskConfig,
) -> Result<OptimizeResult> {
    config.validate()?;
    calibration.check_fits(ckpt.config())?;
    let cfg = ckpt.config();
    if scores.widths() != cfg.d_ffn {
        return Err(Error::Shape {
            node: "saliency scores".into(),
            expected: cfg.d_ffn.clone(),
            actual: scores.widths(),
        });
    }
    if calibration.len < 2 {
        return Err(Error::invalid("calibration windows need at least two tokens"));
    }
    let windows = calibration.head(config.batch);
    let batch = LmBatch::from_windows(&windows.sequences)?;
    let baseline_ce = batch_cross_entropy::<f32>(ckpt, &batch, None)?;
    let objective = Objective {
        config: cfg.clone(),
        batch: batch.batch,
        seq: batch.seq,
        baseline_ce,
        alpha: config.alpha,
        target_fraction: config.target_fraction,
        source: MaskSource::Thresholds,
    };
    let mut g = Graph::<f32>::new();
    let og = objective.build_graph(&mut g)?;
    let weights = ckpt.f32_tensors()?;
    let score_tensors: Vec<Tensor<f32>> = scores
        .layers
        .iter()
        .map(|l| Tensor::new(vec![l.score.len()], l.score.iter().map(|&s| s as f32).collect()))
        .collect::<Result<_>>()?;

    let mut thresholds = median_thresholds(scores);
    let mut params: BTreeMap<String, Tensor<f32>> = thresholds
        .iter()
        .enumerate()
        .map(|(l, &t)| (threshold_param(l), Tensor::scalar(t as f32)))
        .collect();
    let initial_gap = (kept_fraction(cfg, &binarize(scores, &thresholds))? - config.target_fraction).abs();
    let mut adam = Adam::new(0.9, 0.999, 1e-8);
    let mut trace = Vec::with_capacity(config.iterations);

    for it in 0..config.iterations {
        let temperature = config.temperature_at(it);
        let inv_t = Tensor::scalar((1.0 / temperature) as f32);
        {
            let mut b = Bindings::new();
            for (k, v) in &weights {
                b.tensor(k.clone(), v);
            }
            for (l, t) in score_tensors.iter().enumerate() {
                b.tensor(scores_input(l), t);
            }
            for (k, v) in &params {
                b.tensor(k.clone(), v);
            }
            b.tensor(INV_TEMPERATURE, &inv_t);
            batch.bind(&mut b);
            g.forward(&b)?;
        }
        let task = g.scalar(og.task)? as f64;
        let kept = g.scalar(og.kept)? as f64;
        let resource = g.scalar(og.resource)? as f64;
        let ce = g.scalar(og.lm.loss)? as f64;
        let binary = binarize(scores, &thresholds);
        let entry = LossBreakdown {
            iteration: it,
            temperature,
            task_loss: task,
            resource_loss: resource,
            combined: combined_loss(task, resource, config.alpha)?,
            kept_fraction: kept,
            binary_kept_fraction: kept_fraction(cfg, &binary)?,
            perf_ratio: ce / baseline_ce,
        };
        let finite = [task, resource, kept, ce, entry.combined].iter().all(|v| v.is_finite());
        trace.push(entry);
        if !finite {
            return Err(Error::MaskOptimizationAborted { iteration: it, trace });
        }
        let mut grads = g.backward(og.combined)?;
        grads.retain(|k, _| params.contains_key(k));
        if grads.values().any(|t| !t.is_finite()) {
            return Err(Error::MaskOptimizationAborted { iteration: it, trace });
        }
        adam.update(&mut params, &grads, config.step_size as f32);
        for (l, t) in thresholds.iter_mut().enumerate() {
            *t = params[&threshold_param(l)].data()[0] as f64;
        }
    }

    let temperature = config.temperature_at(config.iterations.saturating_sub(1));
    let state = MaskState::new(scores, thresholds, temperature, config.alpha, config.target_fraction)?;
    let kept = kept_fraction(cfg, &state.binary)?;
    let ce = batch_cross_entropy(ckpt, &batch, Some(&state.binary))?;
    let task = (ce / baseline_ce) * (ce / baseline_ce);
    let resource = resource_loss(kept, config.target_fraction)?;
    let final_breakdown = LossBreakdown {
        iteration: config.iterations,
        temperature,
        task_loss: task,
        resource_loss: resource,
        combined: combined_loss(task, resource, config.alpha)?,
        kept_fraction: kept,
        binary_kept_fraction: kept,
        perf_ratio: ce / baseline_ce,
    };
    let final_gap = (kept - config.target_fraction).abs();
    let allowed = (3.0 * initial_gap).max(0.02);
    let status = if final_gap > allowed {
        let msg = format!(
            "kept fraction {kept:.4} is {final_gap:.4} from target {} (initial gap {initial_gap:.4})",
            config.target_fraction
        );
        log::warn!("{msg}");
        OptimizeStatus::Warning(msg)
    } else {
        OptimizeStatus::Converged
    };
    Ok(OptimizeResult {
        state,
        trace,
        final_breakdown,
        kept_fraction: kept,
        status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::saliency::LayerScores;

    fn scores(layers: Vec<Vec<f64>>) -> SaliencyScores {
        SaliencyScores {
            layers: layers
                .into_iter()
                .map(|s| LayerScores {
                    raw_mag: s.clone(),
                    raw_jac: vec![0.0; s.len()],
                    score: s,
                    normalization: None,
                })
                .collect(),
        }
    }

    #[test]
    fn resource_loss_values() {
        assert_eq!(resource_loss(0.5, 0.5).unwrap(), 0.0);
        assert_eq!(resource_loss(1.0, 0.5).unwrap(), 0.25);
        assert!((resource_loss(0.33, 0.5).unwrap() - 0.0289).abs() < 1e-12);
        assert!(resource_loss(0.5, 0.0).is_err());
        assert!(resource_loss(0.5, 1.5).is_err());
    }

    #[test]
    fn combined_loss_values() {
        assert_eq!(combined_loss(1.3, 0.2, 1.0).unwrap(), 1.3);
        assert_eq!(combined_loss(1.3, 0.2, 0.0).unwrap(), 0.2);
        assert!((combined_loss(1.2, 0.04, 0.5).unwrap() - 0.62).abs() < 1e-12);
        assert!(combined_loss(1.0, 0.0, -0.1).is_err());
    }

    #[test]
    fn soft_masks_and_binarization() {
        let s = scores(vec![vec![0.0, 10.0, -10.0, 0.3]]);
        let m = soft_mask(&s, &[0.0], 1.0).unwrap();
        assert_eq!(m[0][0], 0.5);
        assert!(m[0][1] > 0.9999);
        let sharp = soft_mask(&s, &[0.0], 1e-4).unwrap();
        assert_eq!(sharp[0][3], 1.0);
        assert_eq!(sharp[0][2], 0.0);
        assert!(soft_mask(&s, &[0.0], 0.0).is_err());
        assert_eq!(binarize(&s, &[0.0]), vec![vec![1.0, 1.0, 0.0, 1.0]]);
        assert_eq!(binarize(&s, &[100.0]), vec![vec![0.0; 4]]);
        let mut st = MaskState::new(&s, vec![0.0], 1.0, 0.5, 0.5).unwrap();
        let first = st.binarize(&s).clone();
        assert_eq!(st.binarize(&s), &first);
    }

    #[test]
    fn kept_fraction_weights_by_edges() {
        let cfg = ModelConfig {
            d_ffn: vec![4, 2],
            ..ModelConfig::uniform(4, 4, 2, 4, 1, 0)
        };
        let k = kept_fraction(&cfg, &[vec![1.0f32, 0.0, 1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert!((k - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn temperature_schedule_endpoints() {
        let c = MaskConfig {
            iterations: 11,
            ..MaskConfig::default()
        };
        assert!((c.temperature_at(0) - 1.0).abs() < 1e-12);
        assert!((c.temperature_at(10) - 0.05).abs() < 1e-12);
        assert!(c.temperature_at(5) < c.temperature_at(4));
    }

    #[test]
    fn median_initialization() {
        let s = scores(vec![vec![3.0, 1.0, 2.0], vec![4.0, 1.0, 2.0, 3.0], vec![]]);
        assert_eq!(median_thresholds(&s), vec![2.0, 2.5, 0.0]);
    }
}
