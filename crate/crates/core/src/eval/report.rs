//! Evaluation of one checkpoint and its CSV row.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mcq::{mcq_accuracy, McqResult, McqTask};
use super::perplexity::perplexity;
use super::throughput::{throughput, ThroughputReport};
use crate::data::spt::write_atomic;
use crate::data::ByteTokenizer;
use crate::error::{Error, Result};
use crate::model::Checkpoint;

pub const CSV_HEADER: [&str; 10] = [
    "fraction",
    "params",
    "ppl_in",
    "ppl_cross",
    "mcq_acc",
    "mcq_ci_lo",
    "mcq_ci_hi",
    "tok_s",
    "retention",
    "status",
];

/// Prompt for throughput runs.
pub const THROUGHPUT_PROMPT: &str = "The patient presented with";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    /// Pruned fraction of FFN edges, `1 − |E'|/|E|`.
    pub prune_fraction: f64,
    pub quantized: bool,
    pub params: usize,
    pub ppl_in: f64,
    pub ppl_cross: f64,
    pub mcq: Option<McqResult>,
    pub throughput: Option<ThroughputReport>,
    pub power_watts: Option<f64>,
    pub tok_s_per_watt: Option<f64>,
    /// `baseline_ppl_in / ppl_in`; higher is better.
    pub retention: f64,
    /// `ln ppl_in − ln baseline_ppl_in`, the cross-entropy reading of the
    /// same comparison.
    pub cross_entropy_gap: f64,
    pub eta: f64,
    pub meets_eta: bool,
}

/// What to measure besides perplexity.
#[derive(Clone, Debug, Default)]
pub struct EvalOptions<'a> {
    pub mcq: Option<&'a McqTask>,
    /// `(gen_tokens, warmup, repeats)`.
    pub throughput: Option<(usize, usize, usize)>,
    pub power_watts: Option<f64>,
}

/// Inputs shared by every checkpoint compared against one baseline.
#[derive(Clone, Copy, Debug)]
pub struct EvalContext<'a> {
    pub in_domain: &'a [usize],
    pub cross_domain: &'a [usize],
    pub baseline_ppl_in: f64,
    pub eta: f64,
}

pub fn evaluate(
    model_id: &str,
    ckpt: &Checkpoint,
    prune_fraction: f64,
    ctx: &EvalContext<'_>,
    opts: &EvalOptions<'_>,
) -> Result<EvalReport> {
    let ppl_in = perplexity(ckpt, ctx.in_domain)?;
    let ppl_cross = perplexity(ckpt, ctx.cross_domain)?;
    let mcq = opts.mcq.map(|t| mcq_accuracy(ckpt, t)).transpose()?;
    let throughput = match opts.throughput {
        Some((gen, warmup, repeats)) => {
            let prompt = ByteTokenizer.encode(THROUGHPUT_PROMPT);
            Some(throughput(ckpt, &prompt, gen, warmup, repeats)?)
        }
        None => None,
    };
    let tok_s_per_watt = match (&throughput, opts.power_watts) {
        (Some(t), Some(w)) if w > 0.0 => Some(t.median / w),
        _ => None,
    };
    let retention = ctx.baseline_ppl_in / ppl_in;
    if !retention.is_finite() {
        return Err(Error::NonFinite("retention".into()));
    }
    Ok(EvalReport {
        model_id: model_id.to_string(),
        prune_fraction,
        quantized: ckpt.is_quantized(),
        params: ckpt.param_count(),
        ppl_in,
        ppl_cross,
        mcq,
        throughput,
        power_watts: opts.power_watts,
        tok_s_per_watt,
        retention,
        cross_entropy_gap: ppl_in.ln() - ctx.baseline_ppl_in.ln(),
        eta: ctx.eta,
        meets_eta: retention >= ctx.eta,
    })
}

impl EvalReport {
    pub fn status(&self) -> &'static str {
        if self.meets_eta {
            "ok"
        } else {
            "below_eta"
        }
    }

    pub fn csv_record(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.prune_fraction.to_string(),
            self.params.to_string(),
            self.ppl_in.to_string(),
            self.ppl_cross.to_string(),
            opt(self.mcq.map(|m| m.accuracy)),
            opt(self.mcq.map(|m| m.ci_lo)),
            opt(self.mcq.map(|m| m.ci_hi)),
            opt(self.throughput.as_ref().map(|t| t.median)),
            self.retention.to_string(),
            self.status().to_string(),
        ]
    }
}

/// Header plus one record per row.
pub fn write_csv(path: &Path, rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(CSV_HEADER).map_err(to_err)?;
    for r in rows {
        w.write_record(r).map_err(to_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
    write_atomic(path, &bytes)
}

/// Parsed rows keyed by header name.
pub fn read_csv(path: &Path) -> Result<Vec<std::collections::BTreeMap<String, String>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}
