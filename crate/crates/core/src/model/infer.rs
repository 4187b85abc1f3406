//! Straight-line forward pass over a [`Checkpoint`], independent of the tape.
//!
//! Handles f32 and q4_0 weights, optional FFN masks, an optional attached
//! LoRA adapter, and a probe that sees every FFN pre-activation.

use std::borrow::Cow;

use super::checkpoint::{Checkpoint, MaskSet, Weight};
use super::config::{names, LAYER_NORM_EPS};
use super::lora::LoraAdapter;
use crate::autodiff::activation::gelu;
use crate::autodiff::graph::{layer_norm_row, softmax_row};
use crate::autodiff::kernels::{dot, mm_nt};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Receives the FFN pre-activation `z = W_up·h + b` of each layer as a
/// row-major `[positions, width]` matrix.
pub trait FfnProbe {
    fn observe(&mut self, layer: usize, pre_activation: &[f32], positions: usize, width: usize);
}

#[derive(Default)]
pub struct ForwardOptions<'a> {
    pub masks: Option<&'a MaskSet>,
    pub adapter: Option<&'a LoraAdapter>,
    pub probe: Option<&'a mut dyn FfnProbe>,
}

/// Logits `[seq_len, vocab_size]`. Masks multiply FFN hidden activations.
pub fn forward_lm(ckpt: &Checkpoint, tokens: &[usize], masks: Option<&MaskSet>) -> Result<Tensor<f32>> {
    forward_with(
        ckpt,
        tokens,
        ForwardOptions {
            masks,
            ..Default::default()
        },
    )
}

pub fn check_tokens(ckpt: &Checkpoint, tokens: &[usize]) -> Result<()> {
    let cfg = ckpt.config();
    if tokens.is_empty() {
        return Err(Error::invalid("empty token sequence"));
    }
    if tokens.len() > cfg.context_length {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            context_length: cfg.context_length,
        });
    }
    if let Some((position, &id)) = tokens.iter().enumerate().find(|(_, &t)| t >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            position,
            vocab_size: cfg.vocab_size,
        });
    }
    Ok(())
}

fn check_masks(ckpt: &Checkpoint, masks: &MaskSet) -> Result<()> {
    let cfg = ckpt.config();
    if masks.len() != cfg.n_layers {
        return Err(Error::invalid(format!(
            "{} mask vectors for {} layers",
            masks.len(),
            cfg.n_layers
        )));
    }
    for (l, (m, &f)) in masks.iter().zip(&cfg.d_ffn).enumerate() {
        if m.len() != f {
            return Err(Error::Shape {
                node: names::mask(l),
                expected: vec![f],
                actual: vec![m.len()],
            });
        }
    }
    Ok(())
}

fn vector<'a>(ckpt: &'a Checkpoint, name: &str) -> Result<Cow<'a, [f32]>> {
    Ok(match ckpt.weight(name)? {
        Weight::F32(t) => Cow::Borrowed(t.data()),
        w @ Weight::Q4(_) => Cow::Owned(w.to_f32().into_data()),
    })
}

fn embedding_row(w: &Weight, r: usize, out: &mut [f32]) {
    match w {
        Weight::F32(t) => out.copy_from_slice(t.row(r)),
        Weight::Q4(q) => {
            let t = q.dequantize();
            out.copy_from_slice(t.row(r));
        }
    }
}

/// `y[rows × out] = x[rows × in] · Wᵀ`, plus the adapter's low-rank term.
fn linear(ckpt: &Checkpoint, adapter: Option<&LoraAdapter>, name: &str, x: &[f32], rows: usize) -> Result<Vec<f32>> {
    let w = ckpt.weight(name)?;
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    let mut y = vec![0.0f32; rows * out_dim];
    match w {
        Weight::F32(t) => mm_nt(x, t.data(), &mut y, rows, in_dim, out_dim, false),
        Weight::Q4(_) => {
            for r in 0..rows {
                w.matvec_rows(&x[r * in_dim..(r + 1) * in_dim], &mut y[r * out_dim..(r + 1) * out_dim]);
            }
        }
    }
    if let Some(f) = adapter.and_then(|a| a.targets.get(name).map(|f| (a, f))) {
        let (adapter, factors) = f;
        let rank = adapter.rank;
        let mut t = vec![0.0f32; rows * rank];
        mm_nt(x, factors.a.data(), &mut t, rows, in_dim, rank, false);
        let mut u = vec![0.0f32; rows * out_dim];
        mm_nt(&t, factors.b.data(), &mut u, rows, rank, out_dim, false);
        for (yv, uv) in y.iter_mut().zip(&u) {
            *yv += adapter.scaling * *uv;
        }
    }
    Ok(y)
}

fn layer_norm(x: &[f32], d: usize, gamma: &[f32], beta: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for (src, dst) in x.chunks(d).zip(out.chunks_mut(d)) {
        layer_norm_row(src, dst, LAYER_NORM_EPS as f32);
        for j in 0..d {
            dst[j] = dst[j] * gamma[j] + beta[j];
        }
    }
    out
}

pub fn forward_with(ckpt: &Checkpoint, tokens: &[usize], mut opts: ForwardOptions<'_>) -> Result<Tensor<f32>> {
    check_tokens(ckpt, tokens)?;
    if let Some(m) = opts.masks {
        check_masks(ckpt, m)?;
    }
    if let Some(a) = opts.adapter {
        a.check_against(ckpt)?;
    }
    let cfg = ckpt.config();
    let (t_len, d) = (tokens.len(), cfg.d_model);
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let adapter = opts.adapter;

    let tok_emb = ckpt.weight(names::TOK_EMB)?;
    let pos_emb = ckpt.weight(names::POS_EMB)?;
    let mut x = vec![0.0f32; t_len * d];
    let mut prow = vec![0.0f32; d];
    for (p, &tok) in tokens.iter().enumerate() {
        let row = &mut x[p * d..(p + 1) * d];
        embedding_row(tok_emb, tok, row);
        embedding_row(pos_emb, p, &mut prow);
        for j in 0..d {
            row[j] += prow[j];
        }
    }

    let scale = 1.0 / (hd as f32).sqrt();
    let mut probs = vec![0.0f32; t_len];
    let mut scores = vec![0.0f32; t_len];
    for l in 0..cfg.n_layers {
        let (g1, b1) = names::ln1(l);
        let h = layer_norm(&x, d, &vector(ckpt, &g1)?, &vector(ckpt, &b1)?);
        let q = linear(ckpt, adapter, &names::wq(l), &h, t_len)?;
        let k = linear(ckpt, adapter, &names::wk(l), &h, t_len)?;
        let v = linear(ckpt, adapter, &names::wv(l), &h, t_len)?;
        let mut ctx = vec![0.0f32; t_len * d];
        for hh in 0..heads {
            let off = hh * hd;
            for i in 0..t_len {
                let qi = &q[i * d + off..i * d + off + hd];
                for j in 0..=i {
                    scores[j] = dot(qi, &k[j * d + off..j * d + off + hd]) * scale;
                }
                softmax_row(&scores[..=i], &mut probs[..=i]);
                let out = &mut ctx[i * d + off..i * d + off + hd];
                for j in 0..=i {
                    let pj = probs[j];
                    for (o, vv) in out.iter_mut().zip(&v[j * d + off..j * d + off + hd]) {
                        *o += pj * *vv;
                    }
                }
            }
        }
        let attn = linear(ckpt, adapter, &names::wo(l), &ctx, t_len)?;
        for (xv, av) in x.iter_mut().zip(&attn) {
            *xv += *av;
        }

        let (g2, b2) = names::ln2(l);
        let h2 = layer_norm(&x, d, &vector(ckpt, &g2)?, &vector(ckpt, &b2)?);
        let f = cfg.d_ffn[l];
        let mut z = linear(ckpt, adapter, &names::up(l), &h2, t_len)?;
        let bias = vector(ckpt, &names::up_bias(l))?;
        if f > 0 {
            for row in z.chunks_mut(f) {
                for (zv, bv) in row.iter_mut().zip(bias.iter()) {
                    *zv += *bv;
                }
            }
        }
        if let Some(p) = opts.probe.as_deref_mut() {
            p.observe(l, &z, t_len, f);
        }
        let mut a: Vec<f32> = z.iter().map(|v| gelu(*v)).collect();
        if let Some(m) = opts.masks {
            let m = &m[l];
            if f > 0 {
                for row in a.chunks_mut(f) {
                    for (av, mv) in row.iter_mut().zip(m) {
                        *av *= *mv;
                    }
                }
            }
        }
        let ffn = linear(ckpt, adapter, &names::down(l), &a, t_len)?;
        for (xv, fv) in x.iter_mut().zip(&ffn) {
            *xv += *fv;
        }
    }

    let hf = layer_norm(
        &x,
        d,
        &vector(ckpt, names::LN_F_GAMMA)?,
        &vector(ckpt, names::LN_F_BETA)?,
    );
    let logits = linear(ckpt, None, names::UNEMBED, &hf, t_len)?;
    Tensor::new(vec![t_len, cfg.vocab_size], logits)
}
