//! The toy decoder expressed on the autodiff tape, for training, LoRA
//! fine-tuning and mask optimization.

use std::collections::BTreeMap;

use super::config::{names, ModelConfig, LAYER_NORM_EPS};
use super::lora::LoraAdapter;
use crate::autodiff::{Bindings, Graph, IndexId, NodeId, Real, Tensor};
use crate::error::{Error, Result};

pub const TOKENS: &str = "tokens";
pub const POSITIONS: &str = "positions";
pub const TARGETS: &str = "targets";

/// Which tensors the tape treats as trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    /// Every base weight.
    Base,
    /// Only LoRA factors; base weights are constants.
    Adapter,
    /// Nothing in the model; gradients may still flow to mask nodes.
    Frozen,
}

pub struct LmGraphOptions<'a> {
    pub batch: usize,
    pub seq: usize,
    pub trainable: Trainable,
    pub adapter: Option<&'a LoraAdapter>,
    /// One `[d_ffn]` node per layer multiplying the FFN hidden activations.
    pub masks: Option<&'a [NodeId]>,
}

pub struct LmGraph {
    pub logits: NodeId,
    pub loss: NodeId,
    pub tokens: IndexId,
    pub positions: IndexId,
    pub targets: IndexId,
}

pub fn lora_a(target: &str) -> String {
    format!("lora.{target}.a")
}

pub fn lora_b(target: &str) -> String {
    format!("lora.{target}.b")
}

struct Builder<'g, 'o, R: Real> {
    g: &'g mut Graph<R>,
    opts: &'o LmGraphOptions<'o>,
}

impl<R: Real> Builder<'_, '_, R> {
    fn weight(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if self.opts.trainable == Trainable::Base {
            self.g.param(name, shape)
        } else {
            self.g.input(name, shape)
        }
    }

    fn linear(&mut self, x: NodeId, name: &str, shape: &[usize]) -> Result<NodeId> {
        let w = self.weight(name, shape)?;
        let y = self.g.matmul_nt(x, w)?;
        let Some(adapter) = self.opts.adapter else {
            return Ok(y);
        };
        if !adapter.targets.contains_key(name) {
            return Ok(y);
        }
        let r = adapter.rank;
        let (a_shape, b_shape) = ([r, shape[1]], [shape[0], r]);
        let (a, b) = if self.opts.trainable == Trainable::Adapter {
            (self.g.param(lora_a(name), &a_shape)?, self.g.param(lora_b(name), &b_shape)?)
        } else {
            (self.g.input(lora_a(name), &a_shape)?, self.g.input(lora_b(name), &b_shape)?)
        };
        let low = self.g.matmul_nt(x, a)?;
        let up = self.g.matmul_nt(low, b)?;
        let up = self.g.scale(up, adapter.scaling as f64)?;
        self.g.add(y, up)
    }

    fn norm(&mut self, x: NodeId, gamma: &str, beta: &str, d: usize) -> Result<NodeId> {
        let g = self.weight(gamma, &[d])?;
        let b = self.weight(beta, &[d])?;
        let n = self.g.layer_norm(x, LAYER_NORM_EPS)?;
        let n = self.g.mul_row(n, g)?;
        self.g.add_row(n, b)
    }
}

/// Builds logits `[batch·seq, vocab]` and mean next-token cross-entropy.
pub fn build_lm<R: Real>(g: &mut Graph<R>, config: &ModelConfig, opts: &LmGraphOptions<'_>) -> Result<LmGraph> {
    config.validate()?;
    let (bsz, seq) = (opts.batch, opts.seq);
    if bsz == 0 || seq == 0 {
        return Err(Error::invalid("batch and sequence length must be positive"));
    }
    if seq > config.context_length {
        return Err(Error::SequenceTooLong {
            len: seq,
            context_length: config.context_length,
        });
    }
    if let Some(m) = opts.masks {
        if m.len() != config.n_layers {
            return Err(Error::invalid(format!(
                "{} mask nodes for {} layers",
                m.len(),
                config.n_layers
            )));
        }
    }
    let n = bsz * seq;
    let d = config.d_model;
    let heads = config.n_heads;
    let tokens = g.index_input(TOKENS, n, config.vocab_size)?;
    let positions = g.index_input(POSITIONS, n, seq)?;
    let targets = g.index_input(TARGETS, n, config.vocab_size)?;

    let mut b = Builder { g, opts };
    let tok_emb = b.weight(names::TOK_EMB, &[config.vocab_size, d])?;
    let pos_emb = b.weight(names::POS_EMB, &[config.context_length, d])?;
    let te = b.g.embedding(tok_emb, tokens)?;
    let pe = b.g.embedding(pos_emb, positions)?;
    let mut x = b.g.add(te, pe)?;

    let att_scale = 1.0 / (config.head_dim() as f64).sqrt();
    for l in 0..config.n_layers {
        let (g1, b1) = names::ln1(l);
        let h = b.norm(x, &g1, &b1, d)?;
        let q = b.linear(h, &names::wq(l), &[d, d])?;
        let k = b.linear(h, &names::wk(l), &[d, d])?;
        let v = b.linear(h, &names::wv(l), &[d, d])?;
        let q = b.g.split_heads(q, bsz, seq, heads)?;
        let k = b.g.split_heads(k, bsz, seq, heads)?;
        let v = b.g.split_heads(v, bsz, seq, heads)?;
        let s = b.g.matmul_nt(q, k)?;
        let s = b.g.scale(s, att_scale)?;
        let p = b.g.softmax(s, true)?;
        let ctx = b.g.matmul(p, v)?;
        let ctx = b.g.merge_heads(ctx, bsz, seq, heads)?;
        let attn = b.linear(ctx, &names::wo(l), &[d, d])?;
        x = b.g.add(x, attn)?;

        let f = config.d_ffn[l];
        let (g2, b2) = names::ln2(l);
        let h = b.norm(x, &g2, &b2, d)?;
        let z = b.linear(h, &names::up(l), &[f, d])?;
        let bias = b.weight(&names::up_bias(l), &[f])?;
        let z = b.g.add_row(z, bias)?;
        let mut a = b.g.gelu(z)?;
        if let Some(m) = opts.masks {
            a = b.g.mul_row(a, m[l])?;
        }
        let out = b.linear(a, &names::down(l), &[d, f])?;
        x = b.g.add(x, out)?;
    }
    let h = b.norm(x, names::LN_F_GAMMA, names::LN_F_BETA, d)?;
    let unembed = b.weight(names::UNEMBED, &[config.vocab_size, d])?;
    let logits = b.g.matmul_nt(h, unembed)?;
    let loss = b.g.cross_entropy(logits, targets)?;
    Ok(LmGraph {
        logits,
        loss,
        tokens,
        positions,
        targets,
    })
}

/// Flattened inputs for a batch of equal-length windows. Each window holds
/// `seq + 1` tokens: inputs are the first `seq`, targets the last `seq`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LmBatch {
    pub batch: usize,
    pub seq: usize,
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

impl LmBatch {
    pub fn from_windows<W: AsRef<[usize]>>(windows: &[W]) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::invalid("empty batch"))?
            .as_ref()
            .len();
        if first < 2 {
            return Err(Error::invalid("windows need at least two tokens"));
        }
        let seq = first - 1;
        let mut out = LmBatch {
            batch: windows.len(),
            seq,
            tokens: Vec::with_capacity(windows.len() * seq),
            positions: Vec::with_capacity(windows.len() * seq),
            targets: Vec::with_capacity(windows.len() * seq),
        };
        for w in windows {
            let w = w.as_ref();
            if w.len() != first {
                return Err(Error::invalid("windows in a batch must share one length"));
            }
            out.tokens.extend_from_slice(&w[..seq]);
            out.positions.extend(0..seq);
            out.targets.extend_from_slice(&w[1..]);
        }
        Ok(out)
    }

    pub fn bind<'a, R: Real>(&'a self, b: &mut Bindings<'a, R>) {
        b.indices(TOKENS, &self.tokens);
        b.indices(POSITIONS, &self.positions);
        b.indices(TARGETS, &self.targets);
    }
}

/// Checkpoint weights (and adapter factors) converted to the tape's precision.
pub fn tape_tensors<R: Real>(
    tensors: &BTreeMap<String, Tensor<f32>>,
    adapter: Option<&LoraAdapter>,
) -> BTreeMap<String, Tensor<R>> {
    let mut out: BTreeMap<String, Tensor<R>> = tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
    if let Some(a) = adapter {
        for (name, f) in &a.targets {
            out.insert(lora_a(name), f.a.cast());
            out.insert(lora_b(name), f.b.cast());
        }
    }
    out
}

pub fn bind_all<'a, R: Real>(b: &mut Bindings<'a, R>, tensors: &'a BTreeMap<String, Tensor<R>>) {
    for (k, v) in tensors {
        b.tensor(k.clone(), v);
    }
}
