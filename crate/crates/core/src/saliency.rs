//! Per-neuron saliency of FFN hidden units over a calibration set: mean
//! activation magnitude `|φ(z)|` plus mean activation derivative `|φ'(z)|`.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::activation::{gelu, gelu_grad};
use crate::data::spt::write_atomic;
use crate::error::{Error, Result};
use crate::model::{forward_with, Checkpoint, FfnProbe, ForwardOptions, ModelConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub mag: Vec<f64>,
    pub jac: Vec<f64>,
    /// Token positions seen.
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyStats {
    pub layers: Vec<LayerStats>,
}

impl FfnProbe for SaliencyStats {
    fn observe(&mut self, layer: usize, z: &[f32], positions: usize, width: usize) {
        let s = &mut self.layers[layer];
        if width > 0 {
            for row in z.chunks(width) {
                for (i, &zi) in row.iter().enumerate() {
                    s.mag[i] += gelu(zi as f64).abs();
                    s.jac[i] += gelu_grad(zi as f64).abs();
                }
            }
        }
        s.count += positions as u64;
    }
}

impl SaliencyStats {
    pub fn new(config: &ModelConfig) -> Self {
        SaliencyStats {
            layers: config
                .d_ffn
                .iter()
                .map(|&f| LayerStats {
                    mag: vec![0.0; f],
                    jac: vec![0.0; f],
                    count: 0,
                })
                .collect(),
        }
    }

    fn check_shape(&self, config: &ModelConfig) -> Result<()> {
        let widths: Vec<usize> = self.layers.iter().map(|l| l.mag.len()).collect();
        if widths != config.d_ffn || self.layers.iter().any(|l| l.jac.len() != l.mag.len()) {
            return Err(Error::Shape {
                node: "saliency stats".into(),
                expected: config.d_ffn.clone(),
                actual: widths,
            });
        }
        Ok(())
    }

    /// Statistics of one batch, starting from zero.
    pub fn of_batch<S: AsRef<[usize]>>(ckpt: &Checkpoint, batch: &[S]) -> Result<Self> {
        let mut part = SaliencyStats::new(ckpt.config());
        for seq in batch {
            forward_with(
                ckpt,
                seq.as_ref(),
                ForwardOptions {
                    masks: ckpt.masks(),
                    adapter: None,
                    probe: Some(&mut part),
                },
            )?;
        }
        Ok(part)
    }

    /// Adds the batch's statistics. The batch is summed on its own before
    /// merging, so accumulating A then B gives the same bits as B then A.
    pub fn accumulate<S: AsRef<[usize]>>(&mut self, ckpt: &Checkpoint, batch: &[S]) -> Result<()> {
        self.check_shape(ckpt.config())?;
        let part = Self::of_batch(ckpt, batch)?;
        self.merge(&part)
    }

    pub fn merge(&mut self, other: &SaliencyStats) -> Result<()> {
        let a: Vec<usize> = self.layers.iter().map(|l| l.mag.len()).collect();
        let b: Vec<usize> = other.layers.iter().map(|l| l.mag.len()).collect();
        if a != b {
            return Err(Error::Shape {
                node: "saliency stats".into(),
                expected: a,
                actual: b,
            });
        }
        for (s, o) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in s.mag.iter_mut().zip(&o.mag) {
                *x += *y;
            }
            for (x, y) in s.jac.iter_mut().zip(&o.jac) {
                *x += *y;
            }
            s.count += o.count;
        }
        Ok(())
    }

    /// `s_i = mag_i / count + jac_i / count`.
    pub fn finalize(&self) -> Result<SaliencyScores> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, s) in self.layers.iter().enumerate() {
            if s.count == 0 {
                return Err(Error::invalid(format!("saliency layer {l} has seen no positions")));
            }
            let n = s.count as f64;
            let raw_mag: Vec<f64> = s.mag.iter().map(|m| m / n).collect();
            let raw_jac: Vec<f64> = s.jac.iter().map(|j| j / n).collect();
            let score: Vec<f64> = raw_mag.iter().zip(&raw_jac).map(|(m, j)| m + j).collect();
            if score.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("saliency scores of layer {l}")));
            }
            layers.push(LayerScores {
                raw_mag,
                raw_jac,
                score,
                normalization: None,
            });
        }
        Ok(SaliencyScores { layers })
    }
}

/// Accumulates over `sequences` split into `threads` contiguous chunks;
/// chunk results merge in chunk order so the output does not depend on
/// scheduling.
pub fn accumulate_parallel<S: AsRef<[usize]> + Sync>(
    ckpt: &Checkpoint,
    sequences: &[S],
    threads: usize,
) -> Result<SaliencyStats> {
    let threads = threads.max(1).min(sequences.len().max(1));
    let chunk = sequences.len().div_ceil(threads).max(1);
    let parts: Vec<Result<SaliencyStats>> = std::thread::scope(|scope| {
        let handles: Vec<_> = sequences
            .chunks(chunk)
            .map(|c| scope.spawn(move || SaliencyStats::of_batch(ckpt, c)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("saliency worker panicked"))
            .collect()
    });
    let mut stats = SaliencyStats::new(ckpt.config());
    for p in parts {
        stats.merge(&p?)?;
    }
    Ok(stats)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScores {
    pub raw_mag: Vec<f64>,
    pub raw_jac: Vec<f64>,
    pub score: Vec<f64>,
    /// Set once `score` has been z-normalized.
    pub normalization: Option<Normalization>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyScores {
    pub layers: Vec<LayerScores>,
}

/// One row of the exported score table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyRecord {
    pub layer: usize,
    pub neuron: usize,
    pub raw_mag: f64,
    pub raw_jac: f64,
    pub score: f64,
}

fn descending(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

impl SaliencyScores {
    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.score.len()).collect()
    }

    /// Per-layer z-normalization of `score` (mean 0, std 1). A layer with
    /// zero spread is only centered. Raw terms are kept.
    pub fn normalized(&self) -> SaliencyScores {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let base = self.raw_score(l);
                let n = base.len();
                if n == 0 {
                    return LayerScores {
                        normalization: Some(Normalization { mean: 0.0, std: 1.0 }),
                        score: Vec::new(),
                        ..l.clone()
                    };
                }
                let mean = base.iter().sum::<f64>() / n as f64;
                let var = base.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n as f64;
                let std = if var > 0.0 { var.sqrt() } else { 1.0 };
                LayerScores {
                    score: base.iter().map(|s| (s - mean) / std).collect(),
                    normalization: Some(Normalization { mean, std }),
                    ..l.clone()
                }
            })
            .collect();
        SaliencyScores { layers }
    }

    fn raw_score(&self, l: &LayerScores) -> Vec<f64> {
        match l.normalization {
            None => l.score.clone(),
            Some(_) => l.raw_mag.iter().zip(&l.raw_jac).map(|(m, j)| m + j).collect(),
        }
    }

    /// Neuron indices of each layer by descending score, ties by index.
    pub fn rank_per_layer(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .map(|l| {
                let mut idx: Vec<usize> = (0..l.score.len()).collect();
                idx.sort_by(|&a, &b| descending(&l.score, a, b));
                idx
            })
            .collect()
    }

    /// `(layer, neuron)` pairs over all layers by descending score, ties by
    /// layer then neuron.
    pub fn rank_global(&self) -> Vec<(usize, usize)> {
        let mut all: Vec<(usize, usize, f64)> = self
            .layers
            .iter()
            .enumerate()
            .flat_map(|(l, s)| s.score.iter().enumerate().map(move |(i, &v)| (l, i, v)))
            .collect();
        all.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
        all.into_iter().map(|(l, i, _)| (l, i)).collect()
    }

    pub fn records(&self) -> Vec<SaliencyRecord> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(layer, l)| {
                (0..l.score.len()).map(move |neuron| SaliencyRecord {
                    layer,
                    neuron,
                    raw_mag: l.raw_mag[neuron],
                    raw_jac: l.raw_jac[neuron],
                    score: l.score[neuron],
                })
            })
            .collect()
    }

    /// Rebuilds finalized (unnormalized) scores from exported records.
    pub fn from_records(widths: &[usize], records: &[SaliencyRecord]) -> Result<Self> {
        let mut layers: Vec<LayerScores> = widths
            .iter()
            .map(|&f| LayerScores {
                raw_mag: vec![f64::NAN; f],
                raw_jac: vec![f64::NAN; f],
                score: vec![f64::NAN; f],
                normalization: None,
            })
            .collect();
        for r in records {
            let l = layers
                .get_mut(r.layer)
                .filter(|l| r.neuron < l.score.len())
                .ok_or_else(|| Error::invalid(format!("saliency record ({}, {}) out of range", r.layer, r.neuron)))?;
            l.raw_mag[r.neuron] = r.raw_mag;
            l.raw_jac[r.neuron] = r.raw_jac;
            l.score[r.neuron] = r.score;
        }
        if layers
            .iter()
            .any(|l| l.score.iter().chain(&l.raw_mag).chain(&l.raw_jac).any(|v| !v.is_finite()))
        {
            return Err(Error::invalid("saliency records are missing neurons or hold non-finite values"));
        }
        Ok(SaliencyScores { layers })
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let doc = SaliencyDocument {
            widths: self.widths(),
            neurons: self.records(),
        };
        let mut bytes = serde_json::to_vec_pretty(&doc)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let doc: SaliencyDocument = serde_json::from_slice(&bytes)?;
        Self::from_records(&doc.widths, &doc.neurons)
    }
}

#[derive(Serialize, Deserialize)]
struct SaliencyDocument {
    widths: Vec<usize>,
    neurons: Vec<SaliencyRecord>,
}

/// Ordered neuron lists: one per layer, or a single global list.
pub fn rank(scores: &SaliencyScores, per_layer: bool) -> Vec<Vec<(usize, usize)>> {
    if per_layer {
        scores
            .rank_per_layer()
            .into_iter()
            .enumerate()
            .map(|(l, idx)| idx.into_iter().map(|i| (l, i)).collect())
            .collect()
    } else {
        vec![scores.rank_global()]
    }
}
