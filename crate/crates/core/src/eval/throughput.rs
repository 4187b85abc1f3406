use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_lm, Checkpoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub gen_tokens: usize,
    pub warmup: usize,
    /// Tokens per second of every timed repeat.
    pub runs: Vec<f64>,
    pub median: f64,
    pub note: String,
}

pub fn tokens_per_second(tokens: usize, seconds: f64) -> f64 {
    tokens as f64 / seconds
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Greedy continuation of `prompt` by `n` tokens, recomputing the full
/// window (at most `context_length` tokens) for every new token.
pub fn greedy_decode(ckpt: &Checkpoint, prompt: &[usize], n: usize) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::invalid("greedy decoding needs a non-empty prompt"));
    }
    let ctx = ckpt.config().context_length;
    let mut seq = prompt.to_vec();
    for _ in 0..n {
        let lo = seq.len().saturating_sub(ctx);
        let logits = forward_lm(ckpt, &seq[lo..], ckpt.masks())?;
        let last = logits.row(logits.shape()[0] - 1);
        let mut best = 0;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        seq.push(best);
    }
    Ok(seq[prompt.len()..].to_vec())
}

/// Wall-clock tokens/s of greedy decoding. `warmup` untimed decodes run
/// first; the machine should be otherwise idle while this runs.
pub fn throughput(ckpt: &Checkpoint, prompt: &[usize], gen_tokens: usize, warmup: usize, repeats: usize) -> Result<ThroughputReport> {
    if gen_tokens == 0 {
        return Err(Error::invalid("gen_tokens must be at least 1"));
    }
    for _ in 0..warmup {
        greedy_decode(ckpt, prompt, gen_tokens)?;
    }
    let mut runs = Vec::with_capacity(repeats.max(1));
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        greedy_decode(ckpt, prompt, gen_tokens)?;
        runs.push(tokens_per_second(gen_tokens, t.elapsed().as_secs_f64()));
    }
    Ok(ThroughputReport {
        gen_tokens,
        warmup,
        median: median(&runs),
        runs,
        note: "single-threaded greedy decode without KV cache; measured exclusively".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic() {
        assert_eq!(tokens_per_second(100, 2.0), 50.0);
        assert_eq!(median(&[3.0, 1.0]), 2.0);
        assert_eq!(median(&[5.0, 1.0, 3.0]), 3.0);
    }
}
