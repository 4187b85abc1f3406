use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::{names, ModelConfig};
use crate::autodiff::Tensor;
use crate::data::spt::{bytes_to_f32, f32_to_bytes, DType, SptFile, SptTensor};
use crate::error::{Error, Result};
use crate::quant::QuantTensor;
use crate::rng::substream;

pub const CHECKPOINT_KIND: &str = "checkpoint";

/// Per-layer FFN hidden masks; one entry per hidden neuron.
pub type MaskSet = Vec<Vec<f32>>;

#[derive(Clone, Debug, PartialEq)]
pub enum Weight {
    F32(Tensor<f32>),
    Q4(QuantTensor),
}

impl Weight {
    pub fn shape(&self) -> &[usize] {
        match self {
            Weight::F32(t) => t.shape(),
            Weight::Q4(q) => q.shape(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn as_f32(&self) -> Option<&Tensor<f32>> {
        match self {
            Weight::F32(t) => Some(t),
            Weight::Q4(_) => None,
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        match self {
            Weight::F32(t) => t.clone(),
            Weight::Q4(q) => q.dequantize(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            Weight::F32(_) => DType::F32,
            Weight::Q4(_) => DType::Q4_0,
        }
    }

    /// `out[r] = row_r · x` for every row.
    pub fn matvec_rows(&self, x: &[f32], out: &mut [f32]) {
        match self {
            Weight::F32(t) => {
                let (rows, cols) = t.rows_cols();
                crate::autodiff::kernels::mm_nt(x, t.data(), out, 1, cols, rows, false);
            }
            Weight::Q4(q) => {
                for (r, o) in out.iter_mut().enumerate() {
                    *o = q.row_dot(r, x);
                }
            }
        }
    }
}

/// Model weights plus architecture, optionally carrying binary FFN masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    config: ModelConfig,
    tensors: BTreeMap<String, Weight>,
    masks: Option<MaskSet>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, tensors: BTreeMap<String, Weight>, masks: Option<MaskSet>) -> Result<Self> {
        config.validate()?;
        let expected = config.tensor_shapes();
        if tensors.len() != expected.len() {
            let extra: Vec<_> = tensors
                .keys()
                .filter(|k| !expected.iter().any(|(n, _)| n == *k))
                .collect();
            return Err(Error::invalid(format!(
                "checkpoint has {} tensors, config expects {} (unexpected: {extra:?})",
                tensors.len(),
                expected.len()
            )));
        }
        for (name, shape) in &expected {
            let w = tensors
                .get(name)
                .ok_or_else(|| Error::invalid(format!("checkpoint is missing tensor {name:?}")))?;
            if w.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    node: name.clone(),
                    expected: shape.clone(),
                    actual: w.shape().to_vec(),
                });
            }
        }
        let ck = Checkpoint {
            config,
            tensors,
            masks: None,
        };
        match masks {
            Some(m) => ck.with_masks(m),
            None => Ok(ck),
        }
    }

    /// Random initialization: N(0, 0.02) weights, residual projections
    /// scaled by 1/√(2·layers), unit norms and zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, "init");
        let std = 0.02f32;
        let resid_std = std / ((2 * config.n_layers.max(1)) as f32).sqrt();
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.tensor_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = if name.ends_with(".gamma") {
                vec![1.0; n]
            } else if name.ends_with(".beta") || name.ends_with("_bias") {
                vec![0.0; n]
            } else {
                let s = if name.ends_with("attn.wo") || name.ends_with("ffn.down") {
                    resid_std
                } else {
                    std
                };
                let normal = Normal::new(0.0f32, s).expect("positive std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            tensors.insert(name, Weight::F32(Tensor::new(shape, data)?));
        }
        Checkpoint::new(config, tensors, None)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &BTreeMap<String, Weight> {
        &self.tensors
    }

    pub fn weight(&self, name: &str) -> Result<&Weight> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no tensor named {name:?}")))
    }

    pub fn f32(&self, name: &str) -> Result<&Tensor<f32>> {
        self.weight(name)?
            .as_f32()
            .ok_or_else(|| Error::Quantized(format!("reading {name}")))
    }

    /// Replaces one tensor, keeping its shape.
    pub fn set(&mut self, name: &str, w: Weight) -> Result<()> {
        let cur = self.weight(name)?;
        if cur.shape() != w.shape() {
            return Err(Error::Shape {
                node: name.to_string(),
                expected: cur.shape().to_vec(),
                actual: w.shape().to_vec(),
            });
        }
        self.tensors.insert(name.to_string(), w);
        Ok(())
    }

    pub fn is_quantized(&self) -> bool {
        self.tensors.values().any(|w| matches!(w, Weight::Q4(_)))
    }

    /// All weights as f32 tensors, failing on quantized checkpoints.
    pub fn f32_tensors(&self) -> Result<BTreeMap<String, Tensor<f32>>> {
        self.tensors
            .iter()
            .map(|(k, w)| {
                w.as_f32()
                    .cloned()
                    .map(|t| (k.clone(), t))
                    .ok_or_else(|| Error::Quantized(format!("reading {k}")))
            })
            .collect()
    }

    pub fn masks(&self) -> Option<&MaskSet> {
        self.masks.as_ref()
    }

    pub fn with_masks(mut self, masks: MaskSet) -> Result<Self> {
        if masks.len() != self.config.n_layers {
            return Err(Error::invalid(format!(
                "{} mask vectors for {} layers",
                masks.len(),
                self.config.n_layers
            )));
        }
        for (l, (m, &f)) in masks.iter().zip(&self.config.d_ffn).enumerate() {
            if m.len() != f {
                return Err(Error::Shape {
                    node: names::mask(l),
                    expected: vec![f],
                    actual: vec![m.len()],
                });
            }
            if m.iter().any(|v| *v != 0.0 && *v != 1.0) {
                return Err(Error::invalid(format!("mask for layer {l} has entries outside {{0, 1}}")));
            }
        }
        self.masks = Some(masks);
        Ok(self)
    }

    pub fn without_masks(mut self) -> Self {
        self.masks = None;
        self
    }

    /// Number of stored weight scalars (masks excluded).
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Weight::numel).sum()
    }

    pub fn to_spt(&self) -> Result<SptFile> {
        let mut tensors = Vec::new();
        for (name, _) in self.config.tensor_shapes() {
            let w = &self.tensors[&name];
            let bytes = match w {
                Weight::F32(t) => {
                    if !t.is_finite() {
                        return Err(Error::NonFinite(format!("tensor {name}")));
                    }
                    f32_to_bytes(t.data())
                }
                Weight::Q4(q) => q.to_bytes(),
            };
            tensors.push(SptTensor {
                name,
                dtype: w.dtype(),
                shape: w.shape().to_vec(),
                bytes,
            });
        }
        if let Some(masks) = &self.masks {
            for (l, m) in masks.iter().enumerate() {
                tensors.push(SptTensor {
                    name: names::mask(l),
                    dtype: DType::F32,
                    shape: vec![m.len()],
                    bytes: f32_to_bytes(m),
                });
            }
        }
        Ok(SptFile {
            kind: CHECKPOINT_KIND.into(),
            config: self.config.clone(),
            meta: BTreeMap::new(),
            tensors,
        })
    }

    pub fn from_spt(file: SptFile) -> Result<Self> {
        if file.kind != CHECKPOINT_KIND {
            return Err(Error::invalid(format!(
                "SPT file holds a {:?}, not a checkpoint",
                file.kind
            )));
        }
        let mut tensors = BTreeMap::new();
        let mut masks: BTreeMap<usize, Vec<f32>> = BTreeMap::new();
        for t in file.tensors {
            let mask_layer = t
                .name
                .strip_prefix("layers.")
                .and_then(|rest| rest.strip_suffix(".ffn.mask"))
                .and_then(|l| l.parse::<usize>().ok());
            match (mask_layer, t.dtype) {
                (Some(l), DType::F32) => {
                    masks.insert(l, bytes_to_f32(&t.bytes));
                }
                (None, DType::F32) => {
                    tensors.insert(
                        t.name,
                        Weight::F32(Tensor::new(t.shape, bytes_to_f32(&t.bytes))?),
                    );
                }
                (None, DType::Q4_0) => {
                    let q = QuantTensor::from_bytes(&t.shape, &t.bytes)?;
                    tensors.insert(t.name, Weight::Q4(q));
                }
                (Some(_), DType::Q4_0) => {
                    return Err(Error::invalid(format!("mask {} cannot be q4_0", t.name)));
                }
            }
        }
        let masks = if masks.is_empty() {
            None
        } else {
            if masks.len() != file.config.n_layers || masks.keys().copied().ne(0..file.config.n_layers) {
                return Err(Error::invalid("checkpoint masks must cover every layer"));
            }
            Some(masks.into_values().collect())
        };
        Checkpoint::new(file.config, tensors, masks)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_spt()?.to_bytes()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_spt()?.write_atomic(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_spt(SptFile::read(path)?)
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}
