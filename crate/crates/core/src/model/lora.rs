//! Low-rank adapters: `W x + s · B (A x)` with `A: [r, in]`, `B: [out, r]`.

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, Normal};

use super::checkpoint::{Checkpoint, Weight};
use super::config::{names, ModelConfig};
use crate::autodiff::kernels::mm_nn;
use crate::autodiff::Tensor;
use crate::data::spt::{bytes_to_f32, f32_to_bytes, DType, SptFile, SptTensor};
use crate::error::{Error, Result};
use crate::rng::substream;

pub const ADAPTER_KIND: &str = "lora_adapter";

#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactors {
    /// `[rank, in]`
    pub a: Tensor<f32>,
    /// `[out, rank]`
    pub b: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub scaling: f32,
    pub config: ModelConfig,
    pub targets: BTreeMap<String, LoraFactors>,
}

/// Attention Q and V projections plus every non-empty FFN down-projection.
pub fn default_targets(config: &ModelConfig) -> Vec<String> {
    let mut out = Vec::new();
    for l in 0..config.n_layers {
        out.push(names::wq(l));
        out.push(names::wv(l));
        if config.d_ffn[l] > 0 {
            out.push(names::down(l));
        }
    }
    out
}

impl LoraAdapter {
    /// Fresh adapter: `A ~ N(0, 1/in)`, `B = 0`, so it starts as a no-op.
    pub fn new(ckpt: &Checkpoint, rank: usize, alpha: f32, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("LoRA rank must be at least 1"));
        }
        let mut rng = substream(seed, "lora-init");
        let mut targets = BTreeMap::new();
        for name in default_targets(ckpt.config()) {
            let shape = ckpt.weight(&name)?.shape().to_vec();
            let (out_dim, in_dim) = (shape[0], shape[1]);
            if rank > out_dim.min(in_dim) {
                return Err(Error::invalid(format!(
                    "LoRA rank {rank} exceeds min dimension of {name} {shape:?}"
                )));
            }
            let normal = Normal::new(0.0f32, 1.0 / (in_dim as f32).sqrt()).expect("positive std");
            let a = Tensor::new(
                vec![rank, in_dim],
                (0..rank * in_dim).map(|_| normal.sample(&mut rng)).collect(),
            )?;
            let b = Tensor::zeros(vec![out_dim, rank]);
            targets.insert(name, LoraFactors { a, b });
        }
        Ok(LoraAdapter {
            rank,
            scaling: alpha / rank as f32,
            config: ckpt.config().clone(),
            targets,
        })
    }

    pub fn check_against(&self, ckpt: &Checkpoint) -> Result<()> {
        for (name, f) in &self.targets {
            let shape = ckpt.weight(name)?.shape();
            let want_a = [self.rank, shape[1]];
            let want_b = [shape[0], self.rank];
            if f.a.shape() != want_a {
                return Err(Error::Shape {
                    node: format!("lora.{name}.a"),
                    expected: want_a.to_vec(),
                    actual: f.a.shape().to_vec(),
                });
            }
            if f.b.shape() != want_b {
                return Err(Error::Shape {
                    node: format!("lora.{name}.b"),
                    expected: want_b.to_vec(),
                    actual: f.b.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn param_names(&self) -> Vec<String> {
        self.targets
            .keys()
            .flat_map(|n| [format!("lora.{n}.a"), format!("lora.{n}.b")])
            .collect()
    }

    pub fn to_spt(&self) -> Result<SptFile> {
        let mut tensors = Vec::new();
        for (name, f) in &self.targets {
            for (suffix, t) in [("a", &f.a), ("b", &f.b)] {
                tensors.push(SptTensor {
                    name: format!("lora.{name}.{suffix}"),
                    dtype: DType::F32,
                    shape: t.shape().to_vec(),
                    bytes: f32_to_bytes(t.data()),
                });
            }
        }
        let mut meta = BTreeMap::new();
        meta.insert("rank".into(), serde_json::json!(self.rank));
        meta.insert("scaling".into(), serde_json::json!(self.scaling));
        Ok(SptFile {
            kind: ADAPTER_KIND.into(),
            config: self.config.clone(),
            meta,
            tensors,
        })
    }

    pub fn from_spt(file: SptFile) -> Result<Self> {
        if file.kind != ADAPTER_KIND {
            return Err(Error::invalid(format!("SPT file holds a {:?}, not an adapter", file.kind)));
        }
        let rank = file
            .meta
            .get("rank")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::invalid("adapter metadata lacks rank"))? as usize;
        let scaling = file
            .meta
            .get("scaling")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::invalid("adapter metadata lacks scaling"))? as f32;
        let mut parts: BTreeMap<String, (Option<Tensor<f32>>, Option<Tensor<f32>>)> = BTreeMap::new();
        for t in file.tensors {
            let body = t
                .name
                .strip_prefix("lora.")
                .ok_or_else(|| Error::invalid(format!("unexpected adapter tensor {}", t.name)))?;
            let tensor = Tensor::new(t.shape, bytes_to_f32(&t.bytes))?;
            if let Some(n) = body.strip_suffix(".a") {
                parts.entry(n.to_string()).or_default().0 = Some(tensor);
            } else if let Some(n) = body.strip_suffix(".b") {
                parts.entry(n.to_string()).or_default().1 = Some(tensor);
            } else {
                return Err(Error::invalid(format!("unexpected adapter tensor {}", t.name)));
            }
        }
        let mut targets = BTreeMap::new();
        for (name, (a, b)) in parts {
            match (a, b) {
                (Some(a), Some(b)) => {
                    targets.insert(name, LoraFactors { a, b });
                }
                _ => return Err(Error::invalid(format!("adapter target {name} lacks a factor"))),
            }
        }
        Ok(LoraAdapter {
            rank,
            scaling,
            config: file.config,
            targets,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_spt()?.write_atomic(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_spt(SptFile::read(path)?)
    }
}

/// Folds the adapter into the base weights: `W' = W + s · B A`.
pub fn lora_merge(ckpt: &Checkpoint, adapter: &LoraAdapter) -> Result<Checkpoint> {
    adapter.check_against(ckpt)?;
    let mut merged = ckpt.clone();
    for (name, f) in &adapter.targets {
        let base = ckpt.f32(name)?;
        let (out_dim, in_dim) = (base.shape()[0], base.shape()[1]);
        let mut delta = vec![0.0f32; out_dim * in_dim];
        mm_nn(f.b.data(), f.a.data(), &mut delta, out_dim, adapter.rank, in_dim, false);
        let data: Vec<f32> = base
            .data()
            .iter()
            .zip(&delta)
            .map(|(w, dw)| *w + adapter.scaling * *dw)
            .collect();
        merged.set(name, Weight::F32(Tensor::new(base.shape().to_vec(), data)?))?;
    }
    Ok(merged)
}
