use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tokenizer::ByteTokenizer;
use crate::error::{Error, Result};

/// Train/validation fractions. The validation slice is the tail of the
/// corpus and holds `ceil(validation · total)` tokens.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: f64,
    pub validation: f64,
}

impl Default for Split {
    fn default() -> Self {
        Split {
            train: 0.9,
            validation: 0.1,
        }
    }
}

impl Split {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| (0.0..=1.0).contains(&x);
        if !ok(self.train) || !ok(self.validation) || (self.train + self.validation - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "split fractions must lie in [0, 1] and sum to 1, got {}/{}",
                self.train, self.validation
            )));
        }
        Ok(())
    }
}

/// A tokenized corpus with a contiguous train prefix and validation suffix.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenStream {
    source: PathBuf,
    tokens: Vec<usize>,
    train_len: usize,
}

impl TokenStream {
    pub fn from_text(source: impl Into<PathBuf>, text: &str, split: Split) -> Result<Self> {
        split.validate()?;
        let source = source.into();
        let tokens = ByteTokenizer.encode(text);
        if tokens.is_empty() {
            return Err(Error::EmptyCorpus(source));
        }
        let val = (split.validation * tokens.len() as f64).ceil() as usize;
        let train_len = tokens.len() - val.min(tokens.len());
        Ok(TokenStream {
            source,
            tokens,
            train_len,
        })
    }

    pub fn source(&self) -> &Path {
        &self.source
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn train(&self) -> &[usize] {
        &self.tokens[..self.train_len]
    }

    pub fn validation(&self) -> &[usize] {
        &self.tokens[self.train_len..]
    }

    /// Token offset where the validation slice begins.
    pub fn validation_start(&self) -> usize {
        self.train_len
    }

    /// Concatenates the training slices of several streams, then their
    /// validation slices, so the mixture keeps every split disjoint.
    pub fn mix(source: impl Into<PathBuf>, streams: &[&TokenStream]) -> Result<Self> {
        let source = source.into();
        let mut tokens: Vec<usize> = streams.iter().flat_map(|s| s.train().iter().copied()).collect();
        let train_len = tokens.len();
        tokens.extend(streams.iter().flat_map(|s| s.validation().iter().copied()));
        if tokens.is_empty() {
            return Err(Error::EmptyCorpus(source));
        }
        Ok(TokenStream {
            source,
            tokens,
            train_len,
        })
    }
}

pub fn load_corpus(path: &Path, split: Split) -> Result<TokenStream> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let stream = TokenStream::from_text(path, &text, split)?;
    log::info!(
        "loaded {}: {} tokens ({} train, {} validation)",
        path.display(),
        stream.len(),
        stream.train().len(),
        stream.validation().len()
    );
    Ok(stream)
}
