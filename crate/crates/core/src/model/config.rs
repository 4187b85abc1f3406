use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
}

/// Architecture of the toy decoder. FFN widths are per layer so a pruned
/// checkpoint can carry a different hidden width in every block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelConfig {
    /// Uniform FFN width across layers.
    pub fn uniform(
        vocab_size: usize,
        context_length: usize,
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        d_ffn: usize,
    ) -> Self {
        ModelConfig {
            vocab_size,
            context_length,
            n_layers,
            d_model,
            n_heads,
            d_ffn: vec![d_ffn; n_layers],
            activation: Activation::Gelu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::invalid("vocab_size must be at least 2"));
        }
        if self.context_length == 0 {
            return Err(Error::invalid("context_length must be positive"));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ffn.len() != self.n_layers {
            return Err(Error::invalid(format!(
                "d_ffn lists {} widths for {} layers",
                self.d_ffn.len(),
                self.n_layers
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn total_ffn_neurons(&self) -> usize {
        self.d_ffn.iter().sum()
    }

    /// FFN edges: every hidden neuron has `d_model` inputs and `d_model` outputs.
    pub fn ffn_edges(&self) -> usize {
        self.total_ffn_neurons() * 2 * self.d_model
    }

    /// Every tensor of a checkpoint with this configuration, in canonical order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out = vec![
            ("tok_emb".to_string(), vec![self.vocab_size, d]),
            ("pos_emb".to_string(), vec![self.context_length, d]),
        ];
        for (l, &f) in self.d_ffn.iter().enumerate() {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.push((p("ln1.gamma"), vec![d]));
            out.push((p("ln1.beta"), vec![d]));
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((p(&format!("attn.{w}")), vec![d, d]));
            }
            out.push((p("ln2.gamma"), vec![d]));
            out.push((p("ln2.beta"), vec![d]));
            out.push((p("ffn.up"), vec![f, d]));
            out.push((p("ffn.up_bias"), vec![f]));
            out.push((p("ffn.down"), vec![d, f]));
        }
        out.push(("ln_f.gamma".to_string(), vec![d]));
        out.push(("ln_f.beta".to_string(), vec![d]));
        out.push(("unembed".to_string(), vec![self.vocab_size, d]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensor_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Canonical tensor names.
pub mod names {
    pub fn wq(l: usize) -> String {
        format!("layers.{l}.attn.wq")
    }
    pub fn wk(l: usize) -> String {
        format!("layers.{l}.attn.wk")
    }
    pub fn wv(l: usize) -> String {
        format!("layers.{l}.attn.wv")
    }
    pub fn wo(l: usize) -> String {
        format!("layers.{l}.attn.wo")
    }
    pub fn ln1(l: usize) -> (String, String) {
        (format!("layers.{l}.ln1.gamma"), format!("layers.{l}.ln1.beta"))
    }
    pub fn ln2(l: usize) -> (String, String) {
        (format!("layers.{l}.ln2.gamma"), format!("layers.{l}.ln2.beta"))
    }
    pub fn up(l: usize) -> String {
        format!("layers.{l}.ffn.up")
    }
    pub fn up_bias(l: usize) -> String {
        format!("layers.{l}.ffn.up_bias")
    }
    pub fn down(l: usize) -> String {
        format!("layers.{l}.ffn.down")
    }
    pub fn mask(l: usize) -> String {
        format!("layers.{l}.ffn.mask")
    }
    pub const TOK_EMB: &str = "tok_emb";
    pub const POS_EMB: &str = "pos_emb";
    pub const LN_F_GAMMA: &str = "ln_f.gamma";
    pub const LN_F_BETA: &str = "ln_f.beta";
    pub const UNEMBED: &str = "unembed";
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        let mut c = ModelConfig::uniform(258, 64, 2, 64, 4, 128);
        c.validate().unwrap();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c.n_heads = 4;
        c.d_ffn = vec![1];
        assert!(c.validate().is_err());
        c.d_ffn = vec![64, 0];
        c.validate().unwrap();
        c.vocab_size = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn counts() {
        let c = ModelConfig {
            d_ffn: vec![64, 32, 48],
            ..ModelConfig::uniform(10, 8, 3, 16, 2, 0)
        };
        assert_eq!(c.total_ffn_neurons(), 144);
        assert_eq!(c.ffn_edges(), 144 * 32);
        let per_layer_fixed = 4 * 16 + 4 * 16 * 16;
        let expected = 10 * 16 * 2 + 8 * 16 + 3 * per_layer_fixed + 144 * (2 * 16 + 1) + 2 * 16;
        assert_eq!(c.param_count(), expected);
    }
}
