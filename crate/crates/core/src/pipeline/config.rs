//! The JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ByteTokenizer, Split};
use crate::mask::MaskConfig;
use crate::model::{ModelConfig, TrainHyper};
use crate::quant::QuantPolicy;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: field `{field}`: {message}")]
    Field {
        path: PathBuf,
        field: String,
        message: String,
    },
    #[error("{path}: unsupported schema_version {found} (expected {SCHEMA_VERSION})")]
    Schema { path: PathBuf, found: u32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// In-domain corpus: calibration, fine-tuning and `ppl_in`.
    pub corpus_in: PathBuf,
    /// Cross-domain corpus for `ppl_cross`.
    pub corpus_cross: PathBuf,
    #[serde(default)]
    pub mcq: Option<PathBuf>,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub context_length: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
}

impl ModelSection {
    pub fn to_config(&self) -> ModelConfig {
        ModelConfig::uniform(
            ByteTokenizer::VOCAB_SIZE,
            self.context_length,
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.d_ffn,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    pub n: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub alpha: f64,
    pub target_fraction: f64,
    pub iterations: usize,
    pub step_size: f64,
    pub temperature_start: f64,
    pub temperature_end: f64,
    pub batch: usize,
    /// Minimum acceptable `baseline_ppl / pruned_ppl`; reported, not enforced.
    #[serde(default = "default_eta")]
    pub eta: f64,
}

fn default_eta() -> f64 {
    0.9
}

impl OptimizerSection {
    pub fn mask_config(&self) -> MaskConfig {
        MaskConfig {
            alpha: self.alpha,
            target_fraction: self.target_fraction,
            iterations: self.iterations,
            step_size: self.step_size,
            temperature_start: self.temperature_start,
            temperature_end: self.temperature_end,
            batch: self.batch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSection {
    pub rank: usize,
    pub alpha: f32,
    pub train: TrainHyper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSection {
    pub policy: QuantPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Measure greedy-decode tokens/s in `eval`.
    pub throughput: bool,
    pub gen_tokens: usize,
    pub warmup: usize,
    pub repeats: usize,
    /// Externally measured power draw; enables tokens/s per watt.
    #[serde(default)]
    pub power_watts: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Pruned fractions `p`; each runs with target kept fraction `1 − p`.
    pub fractions: Vec<f64>,
    pub finetune: bool,
    /// Wall-clock throughput makes the CSV non-reproducible; off by default.
    #[serde(default)]
    pub measure_throughput: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    pub context_length: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub train: TrainHyper,
    /// Calibration windows used for saliency and for the exhaustive search.
    pub batch: usize,
    pub target_fraction: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub split: Split,
    pub model: ModelSection,
    pub train: TrainHyper,
    pub calibration: CalibrationSection,
    pub optimizer: OptimizerSection,
    pub lora: LoraSection,
    pub quant: QuantSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub oracle: OracleSection,
}

fn field_err(path: &Path, field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        path: path.to_path_buf(),
        field: field.to_string(),
        message: message.into(),
    }
}

impl RunConfig {
    /// Parses and validates; relative paths are resolved against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text, path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        cfg.validate(path)?;
        Ok(cfg)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            field_err(path, &field, e.into_inner().to_string())
        })?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Schema {
                path: path.to_path_buf(),
                found: cfg.schema_version,
            });
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.corpus_in);
        fix(&mut self.paths.corpus_cross);
        if let Some(m) = self.paths.mcq.as_mut() {
            fix(m);
        }
        fix(&mut self.paths.out_dir);
    }

    pub fn validate(&self, path: &Path) -> Result<(), ConfigError> {
        let e = |f: &str, m: String| field_err(path, f, m);
        for (f, p) in [("paths.corpus_in", &self.paths.corpus_in), ("paths.corpus_cross", &self.paths.corpus_cross)] {
            if !p.is_file() {
                return Err(e(f, format!("{} does not exist", p.display())));
            }
        }
        if let Some(m) = &self.paths.mcq {
            if !m.is_file() {
                return Err(e("paths.mcq", format!("{} does not exist", m.display())));
            }
        }
        self.split.validate().map_err(|x| e("split", x.to_string()))?;
        self.model.to_config().validate().map_err(|x| e("model", x.to_string()))?;
        self.train.validate().map_err(|x| e("train", x.to_string()))?;
        if self.train.seq > self.model.context_length {
            return Err(e("train.seq", "exceeds model.context_length".into()));
        }
        if self.calibration.n == 0 || self.calibration.len < 2 {
            return Err(e("calibration", "need n ≥ 1 windows of len ≥ 2".into()));
        }
        if self.calibration.len > self.model.context_length {
            return Err(e("calibration.len", "exceeds model.context_length".into()));
        }
        let m = self.optimizer.mask_config();
        if !(0.0..=1.0).contains(&m.alpha) {
            return Err(e("optimizer.alpha", format!("{} is outside [0, 1]", m.alpha)));
        }
        if !(m.target_fraction > 0.0 && m.target_fraction <= 1.0) {
            return Err(e("optimizer.target_fraction", format!("{} is outside (0, 1]", m.target_fraction)));
        }
        if !(0.0..=1.0).contains(&self.optimizer.eta) {
            return Err(e("optimizer.eta", format!("{} is outside [0, 1]", self.optimizer.eta)));
        }
        m.validate().map_err(|x| e("optimizer", x.to_string()))?;
        if self.lora.rank == 0 {
            return Err(e("lora.rank", "must be at least 1".into()));
        }
        self.lora.train.validate().map_err(|x| e("lora.train", x.to_string()))?;
        if self.lora.train.seq > self.model.context_length {
            return Err(e("lora.train.seq", "exceeds model.context_length".into()));
        }
        if self.eval.gen_tokens == 0 {
            return Err(e("eval.gen_tokens", "must be at least 1".into()));
        }
        let f = &self.sweep.fractions;
        if f.iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(e("sweep.fractions", "every fraction must lie in [0, 1)".into()));
        }
        if f.windows(2).any(|w| w[0] >= w[1]) {
            return Err(e("sweep.fractions", "must be strictly increasing".into()));
        }
        let o = &self.oracle;
        if o.d_ffn == 0 || o.d_ffn > crate::eval::oracle::MAX_ORACLE_NEURONS {
            return Err(e("oracle.d_ffn", format!("must lie in 1..={}", crate::eval::oracle::MAX_ORACLE_NEURONS)));
        }
        if !(o.target_fraction > 0.0 && o.target_fraction <= 1.0) || !(0.0..=1.0).contains(&o.alpha) {
            return Err(e("oracle", "target_fraction must lie in (0, 1] and alpha in [0, 1]".into()));
        }
        o.train.validate().map_err(|x| e("oracle.train", x.to_string()))?;
        if o.train.seq > o.context_length {
            return Err(e("oracle.train.seq", "exceeds oracle.context_length".into()));
        }
        Ok(())
    }

    /// Training hyperparameters with the run seed applied.
    pub fn train_hyper(&self) -> TrainHyper {
        TrainHyper {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn lora_hyper(&self) -> TrainHyper {
        TrainHyper {
            seed: self.seed,
            ..self.lora.train.clone()
        }
    }
}
