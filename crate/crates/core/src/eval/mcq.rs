use std::path::Path;

use serde::{Deserialize, Serialize};

use super::perplexity::token_nll;
use crate::data::tokenizer::ByteTokenizer;
use crate::error::{Error, Result};
use crate::model::{forward_lm, Checkpoint};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqItem {
    pub prompt: String,
    pub options: Vec<String>,
    pub answer: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqTask {
    pub items: Vec<McqItem>,
}

impl McqTask {
    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::invalid("multiple-choice task is empty"));
        }
        for (i, item) in self.items.iter().enumerate() {
            if item.options.len() < 2 {
                return Err(Error::invalid(format!("item {i} has fewer than two options")));
            }
            if item.answer >= item.options.len() {
                return Err(Error::invalid(format!("item {i} answer index {} out of range", item.answer)));
            }
            if item.options.iter().any(|o| o.is_empty()) {
                return Err(Error::invalid(format!("item {i} has an empty option")));
            }
        }
        Ok(())
    }

    /// One JSON object `{prompt, options, answer}` per non-blank line.
    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut items = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let item: McqItem = serde_json::from_str(line)
                .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), n + 1)))?;
            items.push(item);
        }
        let task = McqTask { items };
        task.validate()?;
        Ok(task)
    }
}

/// Mean per-token log-likelihood of `option` following `prompt`. An empty
/// prompt is replaced by the BOS token; a prompt too long for the context
/// keeps its most recent tokens.
pub fn option_score(ckpt: &Checkpoint, prompt: &str, option: &str) -> Result<f64> {
    let tok = ByteTokenizer;
    let mut p = tok.encode(prompt);
    if p.is_empty() {
        p.push(ByteTokenizer::BOS);
    }
    let o = tok.encode(option);
    let ctx = ckpt.config().context_length;
    if o.is_empty() {
        return Err(Error::invalid("option tokenizes to nothing"));
    }
    if o.len() + 1 > ctx + 1 {
        return Err(Error::SequenceTooLong {
            len: o.len() + 1,
            context_length: ctx,
        });
    }
    let keep = (ctx + 1 - o.len()).min(p.len());
    let mut seq = p[p.len() - keep..].to_vec();
    let first = seq.len();
    seq.extend_from_slice(&o);
    let logits = forward_lm(ckpt, &seq[..seq.len() - 1], ckpt.masks())?;
    let ll: f64 = (first..seq.len()).map(|j| -token_nll(logits.row(j - 1), seq[j])).sum();
    Ok(ll / o.len() as f64)
}

/// Index of the best-scoring option; ties go to the lowest index.
pub fn predict(ckpt: &Checkpoint, item: &McqItem) -> Result<usize> {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, o) in item.options.iter().enumerate() {
        let s = option_score(ckpt, &item.prompt, o)?;
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McqResult {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Two-sided 95% Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: usize, n: usize) -> (f64, f64) {
    const Z: f64 = 1.959_963_984_540_054;
    if n == 0 {
        return (0.0, 1.0);
    }
    let n_f = n as f64;
    let p = k as f64 / n_f;
    let z2 = Z * Z;
    let denom = 1.0 + z2 / n_f;
    let centre = (p + z2 / (2.0 * n_f)) / denom;
    let half = Z * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

pub fn mcq_accuracy(ckpt: &Checkpoint, task: &McqTask) -> Result<McqResult> {
    task.validate()?;
    let mut correct = 0;
    for item in &task.items {
        if predict(ckpt, item)? == item.answer {
            correct += 1;
        }
    }
    let total = task.items.len();
    let (ci_lo, ci_hi) = wilson_interval(correct, total);
    Ok(McqResult {
        correct,
        total,
        accuracy: correct as f64 / total as f64,
        ci_lo,
        ci_hi,
    })
}
