//! Q4_0 block quantization.
//!
//! A block covers 32 consecutive weights of one tensor row and stores an
//! `f16` scale followed by 16 bytes of 4-bit offset-8 codes, two per byte
//! with the even-indexed weight in the low nibble. Rows are padded
//! independently with zeros to a multiple of 32.
//!
//! The scale is the signed max-magnitude element divided by −8, so that
//! element always lands on code 0. Elements of the opposite sign whose
//! magnitude exceeds 7.5·|d| saturate at code 15; their reconstruction error
//! can reach |d| rather than |d|/2.

use half::f16;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::dot;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const BLOCK_LEN: usize = 32;
pub const BLOCK_BYTES: usize = 18;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Q4Block {
    pub scale: f16,
    pub codes: [u8; 16],
}

impl Q4Block {
    pub fn code(&self, i: usize) -> u8 {
        let b = self.codes[i / 2];
        if i.is_multiple_of(2) {
            b & 0x0f
        } else {
            b >> 4
        }
    }

    pub fn to_bytes(&self) -> [u8; BLOCK_BYTES] {
        let mut out = [0u8; BLOCK_BYTES];
        out[..2].copy_from_slice(&self.scale.to_bits().to_le_bytes());
        out[2..].copy_from_slice(&self.codes);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        let scale = f16::from_bits(u16::from_le_bytes([bytes[0], bytes[1]]));
        let mut codes = [0u8; 16];
        codes.copy_from_slice(&bytes[2..BLOCK_BYTES]);
        Q4Block { scale, codes }
    }
}

/// Quantizes exactly 32 weights.
pub fn quantize_block(weights: &[f32; BLOCK_LEN]) -> Result<Q4Block> {
    if let Some(bad) = weights.iter().find(|w| !w.is_finite()) {
        return Err(Error::NonFinite(format!("q4_0 block input ({bad})")));
    }
    let mut amax = 0.0f32;
    let mut max = 0.0f32;
    for &w in weights {
        if w.abs() > amax {
            amax = w.abs();
            max = w;
        }
    }
    let d = max / -8.0;
    let mut codes = [0u8; 16];
    for (i, &w) in weights.iter().enumerate() {
        let q = if d == 0.0 {
            8
        } else {
            ((w / d).round_ties_even() + 8.0).clamp(0.0, 15.0) as u8
        };
        codes[i / 2] |= if i % 2 == 0 { q } else { q << 4 };
    }
    Ok(Q4Block {
        scale: f16::from_f32(d),
        codes,
    })
}

pub fn dequantize_block(block: &Q4Block) -> [f32; BLOCK_LEN] {
    let d = block.scale.to_f32();
    let mut out = [0.0f32; BLOCK_LEN];
    for (i, o) in out.iter_mut().enumerate() {
        *o = d * (block.code(i) as f32 - 8.0);
    }
    out
}

/// A block-quantized matrix (or vector, as a single row).
#[derive(Clone, Debug, PartialEq)]
pub struct QuantTensor {
    shape: Vec<usize>,
    blocks: Vec<Q4Block>,
}

fn rows_cols(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [n] => Ok((1, *n)),
        [r, c] => Ok((*r, *c)),
        other => Err(Error::invalid(format!(
            "q4_0 covers 1-D or 2-D tensors, got shape {other:?}"
        ))),
    }
}

/// Byte length of a q4_0 payload for `shape`.
pub fn q4_byte_len(shape: &[usize]) -> Result<usize> {
    let (rows, cols) = rows_cols(shape)?;
    Ok(rows * cols.div_ceil(BLOCK_LEN) * BLOCK_BYTES)
}

impl QuantTensor {
    pub fn quantize(t: &Tensor<f32>) -> Result<Self> {
        let (rows, cols) = rows_cols(t.shape())?;
        let per_row = cols.div_ceil(BLOCK_LEN);
        let mut blocks = Vec::with_capacity(rows * per_row);
        let mut buf = [0.0f32; BLOCK_LEN];
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            for b in 0..per_row {
                let chunk = &row[b * BLOCK_LEN..((b + 1) * BLOCK_LEN).min(cols)];
                buf.fill(0.0);
                buf[..chunk.len()].copy_from_slice(chunk);
                blocks.push(quantize_block(&buf)?);
            }
        }
        Ok(QuantTensor {
            shape: t.shape().to_vec(),
            blocks,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn blocks(&self) -> &[Q4Block] {
        &self.blocks
    }

    pub fn rows_cols(&self) -> (usize, usize) {
        rows_cols(&self.shape).expect("validated at construction")
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn blocks_per_row(&self) -> usize {
        self.rows_cols().1.div_ceil(BLOCK_LEN)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.blocks.len() * BLOCK_BYTES);
        for b in &self.blocks {
            out.extend_from_slice(&b.to_bytes());
        }
        out
    }

    pub fn from_bytes(shape: &[usize], bytes: &[u8]) -> Result<Self> {
        let want = q4_byte_len(shape)?;
        if bytes.len() != want {
            return Err(Error::invalid(format!(
                "q4_0 payload for shape {shape:?} must be {want} bytes, got {}",
                bytes.len()
            )));
        }
        Ok(QuantTensor {
            shape: shape.to_vec(),
            blocks: bytes.chunks(BLOCK_BYTES).map(Q4Block::from_bytes).collect(),
        })
    }

    pub fn dequantize(&self) -> Tensor<f32> {
        let (rows, cols) = self.rows_cols();
        let per_row = self.blocks_per_row();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for b in 0..per_row {
                let vals = dequantize_block(&self.blocks[r * per_row + b]);
                let take = (cols - b * BLOCK_LEN).min(BLOCK_LEN);
                data.extend_from_slice(&vals[..take]);
            }
        }
        Tensor::new(self.shape.clone(), data).expect("shape preserved")
    }

    /// Dot product of row `r` with `x`, dequantizing one block at a time.
    pub fn row_dot(&self, r: usize, x: &[f32]) -> f32 {
        let (_, cols) = self.rows_cols();
        debug_assert_eq!(x.len(), cols);
        let per_row = self.blocks_per_row();
        let mut acc = 0.0f32;
        for b in 0..per_row {
            let vals = dequantize_block(&self.blocks[r * per_row + b]);
            let lo = b * BLOCK_LEN;
            let hi = (lo + BLOCK_LEN).min(cols);
            acc += dot(&vals[..hi - lo], &x[lo..hi]);
        }
        acc
    }
}

/// Upper bound on |w − ŵ| for a weight that did not saturate: half a step
/// plus the error from storing the scale in half precision.
pub fn unsaturated_error_bound(block: &Q4Block, d_f32: f32) -> f32 {
    let d16 = block.scale.to_f32();
    d_f32.abs() * 0.5 + 8.0 * (d16 - d_f32).abs()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantPolicy {
    /// Leave every tensor in f32.
    None,
    /// Attention, FFN and unembedding matrices; embeddings, norms and
    /// biases stay f32.
    #[default]
    Matmul,
}

impl QuantPolicy {
    pub fn covers(self, name: &str) -> bool {
        match self {
            QuantPolicy::None => false,
            QuantPolicy::Matmul => {
                name == crate::model::names::UNEMBED
                    || name.ends_with(".attn.wq")
                    || name.ends_with(".attn.wk")
                    || name.ends_with(".attn.wv")
                    || name.ends_with(".attn.wo")
                    || name.ends_with(".ffn.up")
                    || name.ends_with(".ffn.down")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub policy: QuantPolicy,
    pub quantized: Vec<String>,
    /// f32 bytes of the covered tensors before quantization.
    pub covered_f32_bytes: usize,
    /// q4_0 bytes of the covered tensors.
    pub covered_q4_bytes: usize,
    /// Bytes of tensors left in f32.
    pub remainder_bytes: usize,
    /// Tensor bytes before over tensor bytes after.
    pub compression_ratio: f64,
}

/// Quantizes the tensors `policy` covers. Masks are carried over unchanged.
pub fn quantize_checkpoint(
    ckpt: &crate::model::Checkpoint,
    policy: QuantPolicy,
) -> Result<(crate::model::Checkpoint, QuantReport)> {
    use crate::model::Weight;
    let mut tensors = ckpt.tensors().clone();
    let mut report = QuantReport {
        policy,
        quantized: Vec::new(),
        covered_f32_bytes: 0,
        covered_q4_bytes: 0,
        remainder_bytes: 0,
        compression_ratio: 1.0,
    };
    let mut before = 0usize;
    for (name, w) in tensors.iter_mut() {
        let f32_bytes = w.numel() * 4;
        before += f32_bytes;
        match w {
            Weight::F32(t) if policy.covers(name) => {
                let q = QuantTensor::quantize(t)?;
                report.covered_f32_bytes += f32_bytes;
                report.covered_q4_bytes += q.blocks().len() * BLOCK_BYTES;
                report.quantized.push(name.clone());
                *w = Weight::Q4(q);
            }
            Weight::F32(_) => report.remainder_bytes += f32_bytes,
            Weight::Q4(q) => report.covered_q4_bytes += q.blocks().len() * BLOCK_BYTES,
        }
    }
    let after = report.covered_q4_bytes + report.remainder_bytes;
    if after > 0 {
        report.compression_ratio = before as f64 / after as f64;
    }
    let out = crate::model::Checkpoint::new(ckpt.config().clone(), tensors, ckpt.masks().cloned())?;
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn block_from(v: impl Fn(usize) -> f32) -> [f32; 32] {
        std::array::from_fn(v)
    }

    #[test]
    fn all_zero_block() {
        let b = quantize_block(&[0.0; 32]).unwrap();
        assert_eq!(b.scale.to_f32(), 0.0);
        for i in 0..32 {
            assert_eq!(b.code(i), 8);
        }
        assert_eq!(dequantize_block(&b), [0.0; 32]);
    }

    #[test]
    fn minus_eight_maximum_gives_unit_scale() {
        let w = block_from(|i| if i == 5 { -8.0 } else { (i as f32 - 16.0) * 0.2 });
        let b = quantize_block(&w).unwrap();
        assert_eq!(b.scale.to_f32(), 1.0);
        assert_eq!(b.code(5), 0);
        // code = round_half_even(w / 1) + 8
        assert_eq!(b.code(0), 5); // -3.2 -> -3
        assert_eq!(b.code(31), 11); // 3.0
    }

    #[test]
    fn dequantize_formula() {
        let mut codes = [0u8; 16];
        codes[0] = 0x0f | (0x00 << 4); // index 0 -> 15, index 1 -> 0
        for c in codes.iter_mut().skip(1) {
            *c = 0x88;
        }
        let b = Q4Block {
            scale: f16::from_f32(1.0),
            codes,
        };
        let w = dequantize_block(&b);
        assert_eq!(w[0], 7.0);
        assert_eq!(w[1], -8.0);
        assert!(w[2..].iter().all(|v| *v == 0.0));

        let all_eight = Q4Block {
            scale: f16::from_f32(123.0),
            codes: [0x88; 16],
        };
        assert_eq!(dequantize_block(&all_eight), [0.0; 32]);
    }

    #[test]
    fn ties_round_to_even() {
        // max 8 -> d = -1; w = 2.5 -> w/d = -2.5 -> -2 -> code 6
        let w = block_from(|i| match i {
            0 => 8.0,
            1 => 2.5,
            2 => -1.5,
            _ => 0.0,
        });
        let b = quantize_block(&w).unwrap();
        assert_eq!(b.scale.to_f32(), -1.0);
        assert_eq!(b.code(1), 6);
        assert_eq!(b.code(2), 10); // 1.5 -> 2
    }

    #[test]
    fn nibble_order_is_low_even() {
        let w = block_from(|i| if i == 0 { -8.0 } else if i == 1 { 7.0 } else { 0.0 });
        let b = quantize_block(&w).unwrap();
        assert_eq!(b.codes[0], 0x00 | (15 << 4));
        let bytes = b.to_bytes();
        assert_eq!(&bytes[..2], &f16::from_f32(1.0).to_bits().to_le_bytes());
        assert_eq!(Q4Block::from_bytes(&bytes), b);
    }

    #[test]
    fn non_finite_rejected() {
        let mut w = [0.0f32; 32];
        w[3] = f32::NAN;
        assert!(quantize_block(&w).is_err());
        w[3] = f32::INFINITY;
        assert!(quantize_block(&w).is_err());
    }

    #[test]
    fn opposite_sign_saturation_exceeds_half_step() {
        // +1 is the max; -1 maps to +8 and saturates at code 15 (= 7·d).
        let w = block_from(|i| match i {
            0 => 1.0,
            1 => -1.0,
            _ => 0.0,
        });
        let b = quantize_block(&w).unwrap();
        let r = dequantize_block(&b);
        let d = b.scale.to_f32().abs();
        assert_eq!(b.code(1), 15);
        assert!(((w[1] - r[1]).abs() - d).abs() < 1e-6);
    }

    #[test]
    fn ragged_rows_pad_independently() {
        let t = Tensor::new(vec![3, 40], (0..120).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let q = QuantTensor::quantize(&t).unwrap();
        assert_eq!(q.blocks().len(), 3 * 2);
        assert_eq!(q.to_bytes().len(), q4_byte_len(&[3, 40]).unwrap());
        let back = q.dequantize();
        assert_eq!(back.shape(), &[3, 40]);
        let x: Vec<f32> = (0..40).map(|i| i as f32 * 0.01).collect();
        for r in 0..3 {
            let want: f32 = back.row(r).iter().zip(&x).map(|(a, b)| a * b).sum();
            assert!((q.row_dot(r, &x) - want).abs() < 1e-5);
        }
        assert_eq!(QuantTensor::from_bytes(&[3, 40], &q.to_bytes()).unwrap(), q);
        assert!(QuantTensor::quantize(&Tensor::zeros(vec![2, 2, 2])).is_err());
    }

    fn arb_block() -> impl Strategy<Value = [f32; 32]> {
        (prop::array::uniform32(-1.0f32..1.0), 1e-3f32..1e3).prop_map(|(mut b, s)| {
            for v in b.iter_mut() {
                *v *= s;
            }
            b
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn requantizing_is_a_fixed_point(w in arb_block()) {
            let b = quantize_block(&w).unwrap();
            let again = quantize_block(&dequantize_block(&b)).unwrap();
            prop_assert_eq!(b.to_bytes(), again.to_bytes());
        }

        #[test]
        fn unsaturated_error_is_half_step(w in arb_block()) {
            let b = quantize_block(&w).unwrap();
            let r = dequantize_block(&b);
            let mut amax = 0.0f32; let mut max = 0.0f32;
            for &v in &w { if v.abs() > amax { amax = v.abs(); max = v; } }
            let d = max / -8.0;
            let bound = unsaturated_error_bound(&b, d) * (1.0 + 1e-6);
            for i in 0..32 {
                let err = (w[i] - r[i]).abs();
                if b.code(i) == 15 && (w[i] / d) > 7.5 {
                    prop_assert!(err <= d.abs() + bound);
                } else {
                    prop_assert!(err <= bound, "i={} err={} bound={}", i, err, bound);
                }
            }
        }
    }
}
