//! The individual stages. Each reads its upstream artifacts by path, writes
//! into its own directory under the run directory and leaves a manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::manifest::Manifest;
use super::{PipelineError, PipelineResult};
use crate::data::spt::write_atomic;
use crate::data::{load_corpus, sample_calibration, TokenStream};
use crate::error::Error;
use crate::eval::oracle::{oracle_masks, FrontierPoint, MaskEvaluator, OracleReport};
use crate::eval::report::{evaluate, write_csv, EvalContext, EvalOptions};
use crate::eval::sweep::{sweep, LoraSpec, SweepDomain, SweepSpec};
use crate::eval::{perplexity, McqTask};
use crate::mask::{optimize, MaskConfig, OptimizeStatus};
use crate::model::graph::LmBatch;
use crate::model::{lora_finetune, lora_merge, train_baseline, Checkpoint, ModelConfig};
use crate::prune::{extract, plan, verify};
use crate::quant::quantize_checkpoint;
use crate::saliency::{accumulate_parallel, SaliencyScores};

/// Validation windows checked by the prune stage's equivalence test.
const EQUIVALENCE_PROMPTS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Train,
    Calibrate,
    Prune,
    Finetune,
    Quantize,
    Eval,
    Sweep,
    Oracle,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Calibrate => "calibrate",
            Stage::Prune => "prune",
            Stage::Finetune => "finetune",
            Stage::Quantize => "quantize",
            Stage::Eval => "eval",
            Stage::Sweep => "sweep",
            Stage::Oracle => "oracle",
        }
    }
}

/// Artifact locations inside a run directory.
pub mod layout {
    pub const BASELINE: &str = "train/baseline.spt";
    pub const SALIENCY: &str = "calibrate/saliency.json";
    pub const MASKED: &str = "prune/masked.spt";
    pub const PRUNED: &str = "prune/pruned.spt";
    pub const PLAN: &str = "prune/plan.json";
    pub const TRACE: &str = "prune/trace.json";
    pub const EQUIVALENCE: &str = "prune/equivalence.json";
    pub const ADAPTER: &str = "finetune/adapter.spt";
    pub const MERGED: &str = "finetune/merged.spt";
    pub const QUANTIZED: &str = "quantize/model_q4.spt";
    pub const QUANT_REPORT: &str = "quantize/report.json";
    pub const EVAL_JSON: &str = "eval/report.json";
    pub const EVAL_CSV: &str = "eval/report.csv";
    pub const SWEEP_DIR: &str = "sweep";
    pub const ORACLE_MODEL: &str = "oracle/model.spt";
    pub const ORACLE_REPORT: &str = "oracle/report.json";
}

pub struct Run {
    pub config: RunConfig,
    /// Run directory.
    pub out: PathBuf,
    /// Overrides the stage's default input checkpoint.
    pub ckpt: Option<PathBuf>,
    pub threads: usize,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> crate::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn ensure_dir(dir: &Path) -> crate::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

impl Run {
    pub fn load(config_path: &Path, out: Option<PathBuf>, ckpt: Option<PathBuf>, threads: usize) -> PipelineResult<Self> {
        let config = RunConfig::load(config_path)?;
        let out = out.unwrap_or_else(|| config.paths.out_dir.clone());
        Ok(Run {
            config,
            out,
            ckpt,
            threads: threads.max(1),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn require(&self, rel: &str, producer: &'static str) -> PipelineResult<PathBuf> {
        let p = self.path(rel);
        if !p.is_file() {
            return Err(PipelineError::MissingArtifact { path: p, producer });
        }
        Ok(p)
    }

    /// `--ckpt` if given, else the default upstream artifact.
    fn input_ckpt(&self, rel: &str, producer: &'static str) -> PipelineResult<PathBuf> {
        match &self.ckpt {
            Some(p) if p.is_file() => Ok(p.clone()),
            Some(p) => Err(PipelineError::MissingArtifact {
                path: p.clone(),
                producer: "--ckpt",
            }),
            None => self.require(rel, producer),
        }
    }

    fn stage_dir(&self, stage: Stage) -> crate::Result<PathBuf> {
        let d = self.out.join(stage.name());
        ensure_dir(&d)?;
        Ok(d)
    }

    fn manifest(&self, stage: Stage) -> crate::Result<Manifest> {
        Ok(Manifest::new(stage.name(), self.config.seed, serde_json::to_value(&self.config)?))
    }

    fn corpus_in(&self) -> crate::Result<TokenStream> {
        load_corpus(&self.config.paths.corpus_in, self.config.split)
    }

    fn corpus_cross(&self) -> crate::Result<TokenStream> {
        load_corpus(&self.config.paths.corpus_cross, self.config.split)
    }

    fn mcq(&self) -> crate::Result<Option<McqTask>> {
        self.config.paths.mcq.as_deref().map(McqTask::load_jsonl).transpose()
    }

    /// Runs one stage and returns the paths it wrote.
    pub fn execute(&self, stage: Stage) -> PipelineResult<Vec<PathBuf>> {
        log::info!("stage {} -> {}", stage.name(), self.out.display());
        let m = match stage {
            Stage::Train => self.train()?,
            Stage::Calibrate => self.calibrate()?,
            Stage::Prune => self.prune()?,
            Stage::Finetune => self.finetune()?,
            Stage::Quantize => self.quantize()?,
            Stage::Eval => self.eval()?,
            Stage::Sweep => self.sweep()?,
            Stage::Oracle => self.oracle()?,
        };
        let mut written: Vec<PathBuf> = m.outputs.iter().map(|a| a.path.clone()).collect();
        written.push(m.write(&self.out.join(stage.name()))?);
        Ok(written)
    }

    fn train(&self) -> PipelineResult<Manifest> {
        let dir = self.stage_dir(Stage::Train)?;
        let mut m = self.manifest(Stage::Train)?;
        let (a, b) = (self.corpus_in()?, self.corpus_cross()?);
        m.input(&self.config.paths.corpus_in)?;
        m.input(&self.config.paths.corpus_cross)?;
        let mix = TokenStream::mix("train-mix", &[&a, &b])?;
        let ckpt = train_baseline(&self.config.model.to_config(), &mix, &self.config.train_hyper())?;
        let out = dir.join("baseline.spt");
        ckpt.save(&out)?;
        m.output(&out)?;
        Ok(m)
    }

    fn calibrate(&self) -> PipelineResult<Manifest> {
        let src = self.input_ckpt(layout::BASELINE, "train")?;
        let ckpt = Checkpoint::load(&src)?;
        let dir = self.stage_dir(Stage::Calibrate)?;
        let mut m = self.manifest(Stage::Calibrate)?;
        m.input(&src)?;
        m.input(&self.config.paths.corpus_in)?;
        let c = &self.config.calibration;
        let set = sample_calibration(&self.corpus_in()?, c.n, c.len, self.config.seed)?;
        let scores = accumulate_parallel(&ckpt, &set.sequences, self.threads)?.finalize()?.normalized();
        let out = dir.join("saliency.json");
        scores.save_json(&out)?;
        m.output(&out)?;
        Ok(m)
    }

    fn prune(&self) -> PipelineResult<Manifest> {
        let src = self.input_ckpt(layout::BASELINE, "train")?;
        let sal = self.require(layout::SALIENCY, "calibrate")?;
        let ckpt = Checkpoint::load(&src)?;
        let scores = SaliencyScores::load_json(&sal)?.normalized();
        self.stage_dir(Stage::Prune)?;
        let mut m = self.manifest(Stage::Prune)?;
        m.input(&src)?;
        m.input(&sal)?;
        let corpus = self.corpus_in()?;
        let c = &self.config.calibration;
        let set = sample_calibration(&corpus, c.n, c.len, self.config.seed)?;
        let result = optimize(&ckpt, &scores, &set, &self.config.optimizer.mask_config())?;
        if let OptimizeStatus::Warning(w) = &result.status {
            log::warn!("{w}");
        }
        let masked = ckpt.with_masks(result.state.binary.clone())?;
        let plan = plan(&masked)?;
        let pruned = extract(&masked, &plan)?;
        let ctx = masked.config().context_length;
        let prompts: Vec<&[usize]> = corpus
            .validation()
            .chunks(ctx)
            .filter(|w| w.len() == ctx)
            .take(EQUIVALENCE_PROMPTS)
            .collect();
        let eq = verify(&masked, &pruned, &prompts)?;
        masked.save(&self.path(layout::MASKED))?;
        pruned.save(&self.path(layout::PRUNED))?;
        write_json(&self.path(layout::PLAN), &plan)?;
        write_json(&self.path(layout::TRACE), &result)?;
        write_json(&self.path(layout::EQUIVALENCE), &eq)?;
        for rel in [layout::MASKED, layout::PRUNED, layout::PLAN, layout::TRACE, layout::EQUIVALENCE] {
            m.output(&self.path(rel))?;
        }
        if !eq.passed {
            return Err(PipelineError::Equivalence {
                max_abs_diff: eq.max_abs_diff,
                tolerance: eq.tolerance,
            });
        }
        log::info!(
            "kept {:.4} of FFN edges; pruned params {}",
            result.kept_fraction,
            pruned.param_count()
        );
        Ok(m)
    }

    fn finetune(&self) -> PipelineResult<Manifest> {
        let src = self.input_ckpt(layout::PRUNED, "prune")?;
        let ckpt = Checkpoint::load(&src)?;
        self.stage_dir(Stage::Finetune)?;
        let mut m = self.manifest(Stage::Finetune)?;
        m.input(&src)?;
        m.input(&self.config.paths.corpus_in)?;
        let l = &self.config.lora;
        let adapter = lora_finetune(&ckpt, &self.corpus_in()?, l.rank, l.alpha, &self.config.lora_hyper())?;
        let merged = lora_merge(&ckpt, &adapter)?;
        adapter.save(&self.path(layout::ADAPTER))?;
        merged.save(&self.path(layout::MERGED))?;
        m.output(&self.path(layout::ADAPTER))?;
        m.output(&self.path(layout::MERGED))?;
        Ok(m)
    }

    fn quantize(&self) -> PipelineResult<Manifest> {
        let src = self.input_ckpt(layout::MERGED, "finetune")?;
        let ckpt = Checkpoint::load(&src)?;
        self.stage_dir(Stage::Quantize)?;
        let mut m = self.manifest(Stage::Quantize)?;
        m.input(&src)?;
        let (q, report) = quantize_checkpoint(&ckpt, self.config.quant.policy)?;
        q.save(&self.path(layout::QUANTIZED))?;
        write_json(&self.path(layout::QUANT_REPORT), &report)?;
        m.output(&self.path(layout::QUANTIZED))?;
        m.output(&self.path(layout::QUANT_REPORT))?;
        Ok(m)
    }

    fn eval(&self) -> PipelineResult<Manifest> {
        let src = self.input_ckpt(layout::QUANTIZED, "quantize")?;
        let base_path = self.require(layout::BASELINE, "train")?;
        let ckpt = Checkpoint::load(&src)?;
        let baseline = Checkpoint::load(&base_path)?;
        self.stage_dir(Stage::Eval)?;
        let mut m = self.manifest(Stage::Eval)?;
        m.input(&src)?;
        m.input(&base_path)?;
        let (a, b) = (self.corpus_in()?, self.corpus_cross()?);
        let mcq = self.mcq()?;
        let e = &self.config.eval;
        let ctx = EvalContext {
            in_domain: a.validation(),
            cross_domain: b.validation(),
            baseline_ppl_in: perplexity(&baseline, a.validation())?,
            eta: self.config.optimizer.eta,
        };
        let opts = EvalOptions {
            mcq: mcq.as_ref(),
            throughput: e.throughput.then_some((e.gen_tokens, e.warmup, e.repeats)),
            power_watts: e.power_watts,
        };
        let total = baseline.config().total_ffn_neurons();
        let prune_fraction = if total == 0 {
            0.0
        } else {
            1.0 - ckpt.config().total_ffn_neurons() as f64 / total as f64
        };
        let id = src.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let report = evaluate(&id, &ckpt, prune_fraction, &ctx, &opts)?;
        write_json(&self.path(layout::EVAL_JSON), &report)?;
        write_csv(&self.path(layout::EVAL_CSV), &[report.csv_record()])?;
        m.output(&self.path(layout::EVAL_JSON))?;
        m.output(&self.path(layout::EVAL_CSV))?;
        Ok(m)
    }

    /// Sweep settings shared by the CLI and tests.
    pub fn sweep_spec(&self) -> SweepSpec<'_> {
        let c = &self.config;
        SweepSpec {
            fractions: &c.sweep.fractions,
            calibration_n: c.calibration.n,
            calibration_len: c.calibration.len,
            seed: c.seed,
            mask: c.optimizer.mask_config(),
            finetune: c.sweep.finetune.then(|| LoraSpec {
                rank: c.lora.rank,
                alpha: c.lora.alpha,
                hyper: c.lora_hyper(),
            }),
            eta: c.optimizer.eta,
            threads: self.threads,
            eval: EvalOptions {
                mcq: None,
                throughput: c.sweep.measure_throughput.then_some((c.eval.gen_tokens, c.eval.warmup, c.eval.repeats)),
                power_watts: c.eval.power_watts,
            },
        }
    }

    fn sweep(&self) -> PipelineResult<Manifest> {
        let src = self.input_ckpt(layout::BASELINE, "train")?;
        let baseline = Checkpoint::load(&src)?;
        let dir = self.stage_dir(Stage::Sweep)?;
        let mut m = self.manifest(Stage::Sweep)?;
        m.input(&src)?;
        m.input(&self.config.paths.corpus_in)?;
        m.input(&self.config.paths.corpus_cross)?;
        let (a, b) = (self.corpus_in()?, self.corpus_cross()?);
        let mcq = self.mcq()?;
        let spec = self.sweep_spec();
        let domains = [
            SweepDomain {
                name: "in",
                tuned: &a,
                other: &b,
            },
            SweepDomain {
                name: "cross",
                tuned: &b,
                other: &a,
            },
        ];
        let mut summary = Vec::new();
        for d in &domains {
            let rows = sweep(&baseline, d, &spec, mcq.as_ref())?;
            let csv_path = dir.join(format!("sweep_{}.csv", d.name));
            let records: Vec<Vec<String>> = rows.iter().map(|r| r.csv_record()).collect();
            write_csv(&csv_path, &records)?;
            m.output(&csv_path)?;
            for r in &rows {
                if let Some(model) = &r.model {
                    let sub = dir.join(d.name).join(format!("p{:.2}", r.fraction));
                    ensure_dir(&sub)?;
                    let p = sub.join("model.spt");
                    model.save(&p)?;
                    m.output(&p)?;
                }
                summary.push(SweepSummary {
                    domain: d.name.to_string(),
                    fraction: r.fraction,
                    kept_fraction: r.kept_fraction,
                    optimizer_status: r.optimizer_status.clone(),
                    status: r.status.clone(),
                    report: r.report.clone(),
                });
            }
        }
        let summary_path = dir.join("summary.json");
        write_json(&summary_path, &summary)?;
        m.output(&summary_path)?;
        Ok(m)
    }

    pub fn oracle_settings(&self) -> OracleSettings {
        let c = &self.config;
        let o = &c.oracle;
        OracleSettings {
            model: ModelConfig::uniform(
                crate::data::ByteTokenizer::VOCAB_SIZE,
                o.context_length,
                1,
                o.d_model,
                o.n_heads,
                o.d_ffn,
            ),
            train: crate::model::TrainHyper {
                seed: c.seed,
                ..o.train.clone()
            },
            batch: o.batch,
            seed: c.seed,
            mask: MaskConfig {
                alpha: o.alpha,
                target_fraction: o.target_fraction,
                batch: o.batch,
                ..c.optimizer.mask_config()
            },
            eta: c.optimizer.eta,
        }
    }

    fn oracle(&self) -> PipelineResult<Manifest> {
        self.stage_dir(Stage::Oracle)?;
        let mut m = self.manifest(Stage::Oracle)?;
        m.input(&self.config.paths.corpus_in)?;
        let corpus = self.corpus_in()?;
        let settings = self.oracle_settings();
        let ckpt = train_baseline(&settings.model, &corpus, &settings.train)?;
        let exp = oracle_experiment(&ckpt, &corpus, &settings)?;
        ckpt.save(&self.path(layout::ORACLE_MODEL))?;
        write_json(&self.path(layout::ORACLE_REPORT), &exp)?;
        m.output(&self.path(layout::ORACLE_MODEL))?;
        m.output(&self.path(layout::ORACLE_REPORT))?;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SweepSummary {
    domain: String,
    fraction: f64,
    kept_fraction: Option<f64>,
    optimizer_status: Option<OptimizeStatus>,
    status: String,
    report: Option<crate::eval::EvalReport>,
}

#[derive(Clone, Debug)]
pub struct OracleSettings {
    pub model: ModelConfig,
    pub train: crate::model::TrainHyper,
    /// Calibration windows of `context_length` tokens.
    pub batch: usize,
    pub seed: u64,
    pub mask: MaskConfig,
    pub eta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleExperiment {
    pub optimizer_kept: usize,
    pub optimizer_kept_fraction: f64,
    pub optimizer_cross_entropy: f64,
    pub optimizer_status: OptimizeStatus,
    /// Best enumerated mask with `round(target · n)` neurons kept.
    pub best_at_target: FrontierPoint,
    /// `optimizer_cross_entropy / best_at_target.cross_entropy − 1`.
    pub relative_gap: f64,
    pub report: OracleReport,
}

/// Optimizer against exhaustive enumeration on the same calibration batch.
pub fn oracle_experiment(ckpt: &Checkpoint, corpus: &TokenStream, s: &OracleSettings) -> crate::Result<OracleExperiment> {
    let len = ckpt.config().context_length;
    let set = sample_calibration(corpus, s.batch, len, s.seed)?;
    let scores = accumulate_parallel(ckpt, &set.sequences, 1)?.finalize()?.normalized();
    let result = optimize(ckpt, &scores, &set, &s.mask)?;
    let batch = LmBatch::from_windows(&set.head(s.mask.batch).sequences)?;
    let mut eval = MaskEvaluator::new(ckpt, batch.clone())?;
    let optimizer_cross_entropy = eval.cross_entropy(&result.state.binary)?;
    let report = oracle_masks(ckpt, batch, s.eta, None)?;
    let n = report.neurons;
    let k = (s.mask.target_fraction * n as f64).round() as usize;
    let best_at_target = report.frontier[k].clone();
    let optimizer_kept = result.state.binary.iter().flatten().filter(|&&v| v == 1.0).count();
    Ok(OracleExperiment {
        optimizer_kept,
        optimizer_kept_fraction: result.kept_fraction,
        optimizer_cross_entropy,
        optimizer_status: result.status,
        relative_gap: optimizer_cross_entropy / best_at_target.cross_entropy - 1.0,
        best_at_target,
        report,
    })
}
