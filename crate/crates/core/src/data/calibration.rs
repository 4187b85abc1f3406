use rand::seq::index::sample;

use super::corpus::TokenStream;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::substream;

/// Unlabeled windows drawn from the training split for saliency estimation
/// and mask optimization.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    pub sequences: Vec<Vec<usize>>,
    /// Start offset of each window in the source stream.
    pub offsets: Vec<usize>,
    pub len: usize,
}

impl CalibrationSet {
    pub fn count(&self) -> usize {
        self.sequences.len()
    }

    pub fn check_fits(&self, config: &ModelConfig) -> Result<()> {
        if self.sequences.is_empty() {
            return Err(Error::invalid("calibration set is empty"));
        }
        if self.len > config.context_length {
            return Err(Error::SequenceTooLong {
                len: self.len,
                context_length: config.context_length,
            });
        }
        Ok(())
    }

    /// The first `n` windows as their own set.
    pub fn head(&self, n: usize) -> CalibrationSet {
        let n = n.min(self.count());
        CalibrationSet {
            sequences: self.sequences[..n].to_vec(),
            offsets: self.offsets[..n].to_vec(),
            len: self.len,
        }
    }
}

/// Samples `n` non-overlapping windows of `len` tokens from the training
/// split, without replacement.
pub fn sample_calibration(stream: &TokenStream, n: usize, len: usize, seed: u64) -> Result<CalibrationSet> {
    if n == 0 || len == 0 {
        return Err(Error::invalid("calibration needs n ≥ 1 windows of len ≥ 1"));
    }
    let train = stream.train();
    let slots = train.len() / len;
    if n > slots {
        return Err(Error::invalid(format!(
            "{n} windows of {len} tokens need {} training tokens, only {} available",
            n * len,
            train.len()
        )));
    }
    let mut rng = substream(seed, "calibration");
    let picks = sample(&mut rng, slots, n);
    let offsets: Vec<usize> = picks.iter().map(|s| s * len).collect();
    let sequences = offsets.iter().map(|&o| train[o..o + len].to_vec()).collect();
    Ok(CalibrationSet {
        sequences,
        offsets,
        len,
    })
}
