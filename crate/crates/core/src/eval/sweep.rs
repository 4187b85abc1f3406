//! Pruning-rate sweep: for each fraction, optimize masks on the tuned
//! domain, extract, optionally recover with LoRA, and evaluate.

use serde::{Deserialize, Serialize};

use super::mcq::McqTask;
use super::report::{evaluate, EvalContext, EvalOptions, EvalReport};
use crate::data::{sample_calibration, TokenStream};
use crate::error::Result;
use crate::mask::{optimize, MaskConfig, OptimizeStatus};
use crate::model::{lora_finetune, lora_merge, Checkpoint, TrainHyper};
use crate::prune::{extract, plan};
use crate::saliency::{accumulate_parallel, SaliencyScores};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f32,
    pub hyper: TrainHyper,
}

#[derive(Clone, Debug)]
pub struct SweepSpec<'a> {
    /// Pruned fractions `p ∈ [0, 1)`, strictly increasing.
    pub fractions: &'a [f64],
    pub calibration_n: usize,
    pub calibration_len: usize,
    pub seed: u64,
    /// Template; `target_fraction` is replaced by `1 − p`.
    pub mask: MaskConfig,
    pub finetune: Option<LoraSpec>,
    pub eta: f64,
    pub threads: usize,
    pub eval: EvalOptions<'a>,
}

/// `tuned` supplies calibration, fine-tuning and `ppl_in`; `other` gives
/// `ppl_cross`.
#[derive(Clone, Copy, Debug)]
pub struct SweepDomain<'a> {
    pub name: &'a str,
    pub tuned: &'a TokenStream,
    pub other: &'a TokenStream,
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub fraction: f64,
    /// Realized `|E'|/|E|` of the optimizer's masks.
    pub kept_fraction: Option<f64>,
    pub optimizer_status: Option<OptimizeStatus>,
    pub report: Option<EvalReport>,
    pub status: String,
    pub model: Option<Checkpoint>,
}

impl SweepRow {
    pub fn csv_record(&self) -> Vec<String> {
        match &self.report {
            Some(r) => {
                let mut rec = r.csv_record();
                rec[0] = self.fraction.to_string();
                rec[9] = self.status.clone();
                rec
            }
            None => {
                let mut rec = vec![String::new(); 10];
                rec[0] = self.fraction.to_string();
                rec[9] = self.status.clone();
                rec
            }
        }
    }
}

pub fn domain_saliency(baseline: &Checkpoint, domain: &TokenStream, spec: &SweepSpec<'_>) -> Result<SaliencyScores> {
    let calibration = sample_calibration(domain, spec.calibration_n, spec.calibration_len, spec.seed)?;
    Ok(accumulate_parallel(baseline, &calibration.sequences, spec.threads)?
        .finalize()?
        .normalized())
}

fn prune_and_recover(
    baseline: &Checkpoint,
    scores: &SaliencyScores,
    domain: &SweepDomain<'_>,
    spec: &SweepSpec<'_>,
    fraction: f64,
) -> Result<(Checkpoint, f64, OptimizeStatus)> {
    let calibration = sample_calibration(domain.tuned, spec.calibration_n, spec.calibration_len, spec.seed)?;
    let config = MaskConfig {
        target_fraction: 1.0 - fraction,
        ..spec.mask.clone()
    };
    let result = optimize(baseline, scores, &calibration, &config)?;
    let masked = baseline.clone().with_masks(result.state.binary.clone())?;
    let pruned = extract(&masked, &plan(&masked)?)?;
    let model = match &spec.finetune {
        Some(l) => {
            let adapter = lora_finetune(&pruned, domain.tuned, l.rank, l.alpha, &l.hyper)?;
            lora_merge(&pruned, &adapter)?
        }
        None => pruned,
    };
    Ok((model, result.kept_fraction, result.status))
}

/// One row per fraction. A failing fraction is recorded with an
/// `error:` status and the sweep moves on. The zero fraction evaluates the
/// baseline itself.
pub fn sweep(
    baseline: &Checkpoint,
    domain: &SweepDomain<'_>,
    spec: &SweepSpec<'_>,
    mcq: Option<&McqTask>,
) -> Result<Vec<SweepRow>> {
    let ctx = EvalContext {
        in_domain: domain.tuned.validation(),
        cross_domain: domain.other.validation(),
        baseline_ppl_in: super::perplexity(baseline, domain.tuned.validation())?,
        eta: spec.eta,
    };
    let opts = EvalOptions { mcq, ..spec.eval.clone() };
    let needs_scores = spec.fractions.iter().any(|&p| p > 0.0);
    let scores = if needs_scores {
        Some(domain_saliency(baseline, domain.tuned, spec)?)
    } else {
        None
    };
    let mut rows = Vec::with_capacity(spec.fractions.len());
    for &p in spec.fractions {
        let id = format!("{}-p{p}", domain.name);
        let outcome = if p == 0.0 {
            evaluate(&id, baseline, 0.0, &ctx, &opts).map(|r| (baseline.clone(), 1.0, OptimizeStatus::Converged, r))
        } else {
            let scores = scores.as_ref().expect("scores computed for nonzero fractions");
            prune_and_recover(baseline, scores, domain, spec, p).and_then(|(m, kept, st)| {
                let r = evaluate(&id, &m, 1.0 - kept, &ctx, &opts)?;
                Ok((m, kept, st, r))
            })
        };
        let row = match outcome {
            Ok((model, kept, st, report)) => {
                log::info!(
                    "sweep {}: p={p} kept={kept:.4} ppl_in={:.4} ppl_cross={:.4}",
                    domain.name,
                    report.ppl_in,
                    report.ppl_cross
                );
                SweepRow {
                    fraction: p,
                    kept_fraction: Some(kept),
                    optimizer_status: Some(st),
                    status: report.status().to_string(),
                    report: Some(report),
                    model: Some(model),
                }
            }
            Err(e) => {
                log::warn!("sweep {}: p={p} failed: {e}", domain.name);
                SweepRow {
                    fraction: p,
                    kept_fraction: None,
                    optimizer_status: None,
                    report: None,
                    status: format!("error:{e}"),
                    model: None,
                }
            }
        };
        rows.push(row);
    }
    Ok(rows)
}
