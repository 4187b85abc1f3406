use crate::error::{Error, Result};
use crate::model::{forward_with, Checkpoint, ForwardOptions, LoraAdapter};

/// Summed negative log-likelihood (nats) and the number of predicted tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NllSum {
    pub nll: f64,
    pub tokens: usize,
}

impl NllSum {
    pub fn mean(&self) -> f64 {
        self.nll / self.tokens as f64
    }

    pub fn perplexity(&self) -> f64 {
        self.mean().exp()
    }
}

/// `−log softmax(row)[target]`, computed in f64.
pub fn token_nll(row: &[f32], target: usize) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
    max + sum.ln() - row[target] as f64
}

/// Scores every token after the first exactly once. Windows of up to
/// `context_length` tokens overlap by one so each window predicts its own
/// tokens from a fresh context.
pub fn nll_sum(ckpt: &Checkpoint, tokens: &[usize], adapter: Option<&LoraAdapter>) -> Result<NllSum> {
    if tokens.len() < 2 {
        return Err(Error::invalid("perplexity needs at least two tokens"));
    }
    let ctx = ckpt.config().context_length;
    if ctx < 2 {
        return Err(Error::invalid("perplexity needs a context of at least two tokens"));
    }
    let mut out = NllSum::default();
    let mut start = 0;
    while start + 1 < tokens.len() {
        let end = (start + ctx).min(tokens.len());
        let window = &tokens[start..end];
        let logits = forward_with(
            ckpt,
            &window[..window.len() - 1],
            ForwardOptions {
                masks: ckpt.masks(),
                adapter,
                probe: None,
            },
        )?;
        for (i, &t) in window[1..].iter().enumerate() {
            out.nll += token_nll(logits.row(i), t);
        }
        out.tokens += window.len() - 1;
        start = end - 1;
    }
    if !out.nll.is_finite() {
        return Err(Error::NonFinite("perplexity".into()));
    }
    Ok(out)
}

/// `exp` of the mean next-token negative log-likelihood over `tokens`.
pub fn perplexity(ckpt: &Checkpoint, tokens: &[usize]) -> Result<f64> {
    Ok(nll_sum(ckpt, tokens, None)?.perplexity())
}
