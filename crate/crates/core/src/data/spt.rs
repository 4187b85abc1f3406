//! The SPT container: one file type for f32 and q4_0 tensors.
//!
//! ```text
//! "SPT1" | u64 LE header length | JSON header | zero pad to 32 | payload
//! ```
//!
//! Tensor offsets in the header are relative to the start of the payload and
//! are 32-byte aligned. All numeric data is little-endian.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::quant::q4_byte_len;

pub const MAGIC: &[u8; 4] = b"SPT1";
pub const ALIGN: usize = 32;
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum SptError {
    #[error("bad magic {found:?}, expected \"SPT1\"")]
    BadMagic { found: Vec<u8> },
    #[error("truncated file: need {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("tensor table entries {first:?} and {second:?} overlap")]
    Overlap { first: String, second: String },
    #[error("tensor {name:?}: declared length {declared} does not match {expected} for its dtype and shape")]
    LengthMismatch {
        name: String,
        declared: u64,
        expected: u64,
    },
    #[error("tensor {name:?}: offset {offset} is not {ALIGN}-byte aligned")]
    Misaligned { name: String, offset: u64 },
    #[error("unsupported SPT format version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed header: {0}")]
    BadHeader(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "q4_0")]
    Q4_0,
}

impl DType {
    pub fn byte_len(self, shape: &[usize]) -> Result<usize> {
        match self {
            DType::F32 => Ok(shape.iter().product::<usize>() * 4),
            DType::Q4_0 => q4_byte_len(shape),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SptHeader {
    pub format_version: u32,
    pub kind: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SptTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SptFile {
    pub kind: String,
    pub config: ModelConfig,
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<SptTensor>,
}

fn align_up(x: usize) -> usize {
    x.div_ceil(ALIGN) * ALIGN
}

pub fn f32_to_bytes(data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn bytes_to_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

impl SptFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for t in &self.tensors {
            let expected = t.dtype.byte_len(&t.shape)?;
            if expected != t.bytes.len() {
                return Err(SptError::LengthMismatch {
                    name: t.name.clone(),
                    declared: t.bytes.len() as u64,
                    expected: expected as u64,
                }
                .into());
            }
            entries.push(TensorEntry {
                name: t.name.clone(),
                dtype: t.dtype,
                shape: t.shape.clone(),
                offset: offset as u64,
                length: t.bytes.len() as u64,
            });
            offset = align_up(offset + t.bytes.len());
        }
        let header = SptHeader {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            tensors: entries,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload_start = align_up(MAGIC.len() + 8 + json.len());
        let mut out = Vec::with_capacity(payload_start + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.resize(payload_start, 0);
        for (t, e) in self.tensors.iter().zip(&header.tensors) {
            out.resize(payload_start + e.offset as usize, 0);
            out.extend_from_slice(&t.bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let avail = bytes.len() as u64;
        if bytes.len() < 4 {
            return Err(SptError::Truncated {
                needed: 12,
                available: avail,
            }
            .into());
        }
        if &bytes[..4] != MAGIC {
            return Err(SptError::BadMagic {
                found: bytes[..4].to_vec(),
            }
            .into());
        }
        if bytes.len() < 12 {
            return Err(SptError::Truncated {
                needed: 12,
                available: avail,
            }
            .into());
        }
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
        let hend = 12u64.saturating_add(hlen);
        if hend > avail {
            return Err(SptError::Truncated {
                needed: hend,
                available: avail,
            }
            .into());
        }
        let header: SptHeader = serde_json::from_slice(&bytes[12..hend as usize])
            .map_err(|e| SptError::BadHeader(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(SptError::UnsupportedVersion(header.format_version).into());
        }
        let payload_start = align_up(hend as usize) as u64;

        let mut spans: Vec<(u64, u64, &str)> = Vec::new();
        for e in &header.tensors {
            let expected = e.dtype.byte_len(&e.shape)? as u64;
            if expected != e.length {
                return Err(SptError::LengthMismatch {
                    name: e.name.clone(),
                    declared: e.length,
                    expected,
                }
                .into());
            }
            if e.offset % ALIGN as u64 != 0 {
                return Err(SptError::Misaligned {
                    name: e.name.clone(),
                    offset: e.offset,
                }
                .into());
            }
            spans.push((e.offset, e.offset + e.length, &e.name));
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(SptError::Overlap {
                    first: w[0].2.to_string(),
                    second: w[1].2.to_string(),
                }
                .into());
            }
        }
        if let Some(end) = spans.iter().map(|s| s.1).max() {
            let needed = payload_start + end;
            if needed > avail {
                return Err(SptError::Truncated {
                    needed,
                    available: avail,
                }
                .into());
            }
        }

        let tensors = header
            .tensors
            .iter()
            .map(|e| {
                let lo = (payload_start + e.offset) as usize;
                SptTensor {
                    name: e.name.clone(),
                    dtype: e.dtype,
                    shape: e.shape.clone(),
                    bytes: bytes[lo..lo + e.length as usize].to_vec(),
                }
            })
            .collect();
        Ok(SptFile {
            kind: header.kind,
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }

    /// Writes via a temporary file in the target directory and an atomic rename.
    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn tensor(&self, name: &str) -> Option<&SptTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SptFile {
        SptFile {
            kind: "checkpoint".into(),
            config: ModelConfig::uniform(4, 2, 1, 2, 1, 3),
            meta: BTreeMap::new(),
            tensors: vec![
                SptTensor {
                    name: "a".into(),
                    dtype: DType::F32,
                    shape: vec![3],
                    bytes: f32_to_bytes(&[1.0, -2.0, 0.5]),
                },
                SptTensor {
                    name: "q".into(),
                    dtype: DType::Q4_0,
                    shape: vec![2, 33],
                    bytes: vec![7u8; 2 * 2 * 18],
                },
            ],
        }
    }

    #[test]
    fn layout_is_aligned_and_round_trips() {
        let f = sample();
        let bytes = f.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"SPT1");
        let back = SptFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let header: SptHeader = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
        assert_eq!(header.tensors[1].offset % 32, 0);
        assert_eq!(header.tensors[1].length, 72);
    }

    #[test]
    fn distinct_error_kinds() {
        let bytes = sample().to_bytes().unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            SptFile::from_bytes(&bad),
            Err(Error::Spt(SptError::BadMagic { .. }))
        ));

        let short = &bytes[..bytes.len() - 5];
        assert!(matches!(
            SptFile::from_bytes(short),
            Err(Error::Spt(SptError::Truncated { .. }))
        ));

        // Rewrite the header so the second tensor overlaps the first.
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let mut header: SptHeader = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
        header.tensors[1].offset = 0;
        let json = serde_json::to_vec(&header).unwrap();
        let mut forged = Vec::new();
        forged.extend_from_slice(b"SPT1");
        forged.extend_from_slice(&(json.len() as u64).to_le_bytes());
        forged.extend_from_slice(&json);
        forged.resize(forged.len().div_ceil(32) * 32 + 256, 0);
        assert!(matches!(
            SptFile::from_bytes(&forged),
            Err(Error::Spt(SptError::Overlap { .. }))
        ));
    }
}
