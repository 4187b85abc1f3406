//! Exhaustive mask search for tiny models.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::model::graph::{build_lm, LmBatch, LmGraphOptions, Trainable};
use crate::model::{names, Checkpoint, MaskSet};

pub const MAX_ORACLE_NEURONS: usize = 16;

/// Calibration cross-entropy of a fixed batch under arbitrary FFN masks,
/// reusing one tape.
pub struct MaskEvaluator {
    graph: Graph<f32>,
    loss: NodeId,
    weights: std::collections::BTreeMap<String, Tensor<f32>>,
    batch: LmBatch,
    widths: Vec<usize>,
}

impl MaskEvaluator {
    pub fn new(ckpt: &Checkpoint, batch: LmBatch) -> Result<Self> {
        let cfg = ckpt.config();
        let mut graph = Graph::<f32>::new();
        let masks: Vec<NodeId> = cfg
            .d_ffn
            .iter()
            .enumerate()
            .map(|(l, &f)| graph.input(names::mask(l), &[f]))
            .collect::<Result<_>>()?;
        let lm = build_lm(
            &mut graph,
            cfg,
            &LmGraphOptions {
                batch: batch.batch,
                seq: batch.seq,
                trainable: Trainable::Frozen,
                adapter: None,
                masks: Some(&masks),
            },
        )?;
        Ok(MaskEvaluator {
            graph,
            loss: lm.loss,
            weights: ckpt.f32_tensors()?,
            batch,
            widths: cfg.d_ffn.clone(),
        })
    }

    pub fn cross_entropy(&mut self, masks: &MaskSet) -> Result<f64> {
        let tensors: Vec<Tensor<f32>> = masks
            .iter()
            .zip(&self.widths)
            .map(|(m, &f)| Tensor::new(vec![f], m.clone()))
            .collect::<Result<_>>()?;
        let mut b = Bindings::new();
        for (k, v) in &self.weights {
            b.tensor(k.clone(), v);
        }
        for (l, t) in tensors.iter().enumerate() {
            b.tensor(names::mask(l), t);
        }
        self.batch.bind(&mut b);
        self.graph.forward(&b)?;
        Ok(self.graph.scalar(self.loss)? as f64)
    }
}

/// Neuron `j` (counting across layers in order) is kept iff bit `j` is set.
pub fn mask_from_code(widths: &[usize], code: u32) -> MaskSet {
    let mut j = 0;
    widths
        .iter()
        .map(|&f| {
            (0..f)
                .map(|_| {
                    let bit = (code >> j) & 1;
                    j += 1;
                    bit as f32
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub kept: usize,
    pub code: u32,
    pub cross_entropy: f64,
    /// `baseline_ppl / masked_ppl`.
    pub retention: f64,
    pub masks: MaskSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub neurons: usize,
    pub evaluated: usize,
    pub baseline_cross_entropy: f64,
    pub eta: f64,
    /// Best mask at every kept count `0..=neurons`.
    pub frontier: Vec<FrontierPoint>,
    /// Fewest kept FFN edges with retention ≥ η, if any mask qualifies.
    pub minimal: Option<FrontierPoint>,
}

/// Evaluates all `2^n` masks. Ties in cross-entropy go to the smaller code,
/// so the result does not depend on `order`, an optional permutation of
/// `0..2^n` giving the evaluation sequence.
pub fn oracle_masks(ckpt: &Checkpoint, batch: LmBatch, eta: f64, order: Option<&[u32]>) -> Result<OracleReport> {
    let widths = ckpt.config().d_ffn.clone();
    let n: usize = widths.iter().sum();
    if n > MAX_ORACLE_NEURONS {
        return Err(Error::invalid(format!(
            "{n} FFN neurons need 2^{n} evaluations; the oracle handles at most {MAX_ORACLE_NEURONS}"
        )));
    }
    if !(0.0..=f64::MAX).contains(&eta) {
        return Err(Error::invalid(format!("eta {eta} must be non-negative")));
    }
    let count = 1u32 << n;
    let default_order: Vec<u32>;
    let order = match order {
        Some(o) => {
            let mut seen = vec![false; count as usize];
            if o.len() != count as usize || o.iter().any(|&c| c >= count || std::mem::replace(&mut seen[c as usize], true)) {
                return Err(Error::invalid("enumeration order must be a permutation of all mask codes"));
            }
            o
        }
        None => {
            default_order = (0..count).collect();
            &default_order
        }
    };
    let mut eval = MaskEvaluator::new(ckpt, batch)?;
    let full = mask_from_code(&widths, count - 1);
    let baseline = eval.cross_entropy(&full)?;
    let mut best: Vec<Option<(f64, u32)>> = vec![None; n + 1];
    for &code in order {
        let ce = eval.cross_entropy(&mask_from_code(&widths, code))?;
        if !ce.is_finite() {
            return Err(Error::NonFinite(format!("cross-entropy of mask {code:#b}")));
        }
        let k = code.count_ones() as usize;
        let better = match best[k] {
            None => true,
            Some((bce, bcode)) => ce < bce || (ce == bce && code < bcode),
        };
        if better {
            best[k] = Some((ce, code));
        }
    }
    let frontier: Vec<FrontierPoint> = best
        .into_iter()
        .enumerate()
        .map(|(kept, b)| {
            let (ce, code) = b.expect("every kept count is reachable");
            FrontierPoint {
                kept,
                code,
                cross_entropy: ce,
                retention: (baseline - ce).exp(),
                masks: mask_from_code(&widths, code),
            }
        })
        .collect();
    let minimal = frontier.iter().find(|p| p.retention >= eta).cloned();
    Ok(OracleReport {
        neurons: n,
        evaluated: count as usize,
        baseline_cross_entropy: baseline,
        eta,
        frontier,
        minimal,
    })
}
