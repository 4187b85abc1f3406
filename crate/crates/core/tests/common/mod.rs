//! Shared fixtures: per-op gradient-check cases and tiny random models.

#![allow(dead_code)]

use std::path::PathBuf;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use salprune::autodiff::{grad_check, Feed, GradCheckReport, Graph, GraphBuilder, NodeId, Real, Tensor};
use salprune::data::{load_corpus, Split, TokenStream};
use salprune::mask::{MaskSource, Objective};
use salprune::model::graph::{build_lm, LmBatch, LmGraphOptions, Trainable, POSITIONS, TARGETS, TOKENS};
use salprune::model::{Checkpoint, ModelConfig};
use salprune::rng::substream;
use salprune::saliency::{LayerScores, SaliencyScores};
use salprune::Result;

pub const GRAD_TOLERANCE: f64 = 1e-3;

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn toy_corpora() -> (TokenStream, TokenStream) {
    let root = repo_root();
    let a = load_corpus(&root.join("data/toy_clinical.txt"), Split::default()).expect("clinical corpus");
    let b = load_corpus(&root.join("data/toy_kitchen.txt"), Split::default()).expect("kitchen corpus");
    (a, b)
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    MatMulNt,
    BatchedMatMul,
    BatchedMatMulNt,
    Add,
    Mul,
    AddRow,
    MulRow,
    AddScalar,
    MulScalar,
    Affine,
    Gelu,
    Sigmoid,
    Square,
    Softmax,
    CausalSoftmax,
    LayerNorm,
    Embedding,
    CrossEntropy,
    Sum,
    SplitHeads,
    MergeHeads,
}

pub const ALL_OPS: [OpKind; 22] = [
    OpKind::MatMul,
    OpKind::MatMulNt,
    OpKind::BatchedMatMul,
    OpKind::BatchedMatMulNt,
    OpKind::Add,
    OpKind::Mul,
    OpKind::AddRow,
    OpKind::MulRow,
    OpKind::AddScalar,
    OpKind::MulScalar,
    OpKind::Affine,
    OpKind::Gelu,
    OpKind::Sigmoid,
    OpKind::Square,
    OpKind::Softmax,
    OpKind::CausalSoftmax,
    OpKind::LayerNorm,
    OpKind::Embedding,
    OpKind::CrossEntropy,
    OpKind::Sum,
    OpKind::SplitHeads,
    OpKind::MergeHeads,
];

/// One op applied to differentiable inputs, reduced to a scalar through a
/// fixed random weighting so every output element matters.
pub struct OpCase(pub OpKind);

const B: usize = 2;
const T: usize = 3;
const H: usize = 2;
const E: usize = 2;

impl OpCase {
    /// Shapes of the differentiable inputs `a` (and `b` when used).
    fn shapes(&self) -> (Vec<usize>, Option<Vec<usize>>) {
        use OpKind::*;
        match self.0 {
            MatMul => (vec![3, 4], Some(vec![4, 5])),
            MatMulNt => (vec![3, 4], Some(vec![5, 4])),
            BatchedMatMul => (vec![2, 3, 4], Some(vec![2, 4, 5])),
            BatchedMatMulNt => (vec![2, 3, 4], Some(vec![2, 5, 4])),
            Add | Mul => (vec![3, 4], Some(vec![3, 4])),
            AddRow | MulRow => (vec![3, 4], Some(vec![4])),
            AddScalar | MulScalar => (vec![3, 4], Some(vec![1])),
            Affine | Gelu | Sigmoid | Square | Softmax | LayerNorm | Sum => (vec![3, 5], None),
            CausalSoftmax => (vec![2, 4, 4], None),
            Embedding => (vec![6, 3], None),
            CrossEntropy => (vec![5, 7], None),
            SplitHeads => (vec![B * T, H * E], None),
            MergeHeads => (vec![B * H, T, E], None),
        }
    }

    pub fn feed(&self, seed: u64) -> Feed {
        let mut rng = substream(seed, "gradcheck-op");
        let (sa, sb) = self.shapes();
        let mut feed = Feed::new().real("a", normal(&mut rng, &sa, 1.0));
        if let Some(sb) = sb {
            feed = feed.real("b", normal(&mut rng, &sb, 1.0));
        }
        match self.0 {
            OpKind::Embedding => {
                let ids = (0..4).map(|_| rng.random_range(0..6)).collect();
                feed = feed.index("ids", ids);
            }
            OpKind::CrossEntropy => {
                let ids = (0..5).map(|_| rng.random_range(0..7)).collect();
                feed = feed.index("ids", ids);
            }
            _ => {}
        }
        let mut g = Graph::<f64>::new();
        let y = self.output(&mut g).expect("case builds");
        feed.real("w", normal(&mut rng, g.shape(y), 1.0))
    }

    fn output<R: Real>(&self, g: &mut Graph<R>) -> Result<NodeId> {
        use OpKind::*;
        let (sa, sb) = self.shapes();
        let a = g.param("a", &sa)?;
        let b = match &sb {
            Some(s) => Some(g.param("b", s)?),
            None => None,
        };
        let b = || b.expect("second operand");
        match self.0 {
            MatMul | BatchedMatMul => g.matmul(a, b()),
            MatMulNt | BatchedMatMulNt => g.matmul_nt(a, b()),
            Add => g.add(a, b()),
            Mul => g.mul(a, b()),
            AddRow => g.add_row(a, b()),
            MulRow => g.mul_row(a, b()),
            AddScalar => g.add_scalar(a, b()),
            MulScalar => g.mul_scalar(a, b()),
            Affine => g.affine(a, -1.7, 0.3),
            Gelu => g.gelu(a),
            Sigmoid => g.sigmoid(a),
            Square => g.square(a),
            Softmax => g.softmax(a, false),
            CausalSoftmax => g.softmax(a, true),
            LayerNorm => g.layer_norm(a, 1e-5),
            Embedding => {
                let ids = g.index_input("ids", 4, 6)?;
                g.embedding(a, ids)
            }
            CrossEntropy => {
                let ids = g.index_input("ids", 5, 7)?;
                g.cross_entropy(a, ids)
            }
            Sum => g.sum(a),
            SplitHeads => g.split_heads(a, B, T, H),
            MergeHeads => g.merge_heads(a, B, T, H),
        }
    }
}

impl GraphBuilder for OpCase {
    fn build<R: Real>(&self, g: &mut Graph<R>) -> Result<NodeId> {
        let y = self.output(g)?;
        let shape = g.shape(y).to_vec();
        let w = g.input("w", &shape)?;
        let p = g.mul(y, w)?;
        g.sum(p)
    }
}

pub fn check_op(kind: OpKind, seed: u64) -> Result<GradCheckReport> {
    let case = OpCase(kind);
    grad_check(&case, &case.feed(seed), GRAD_TOLERANCE)
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig::uniform(16, 8, 2, 8, 2, 6)
}

pub fn random_batch(config: &ModelConfig, batch: usize, seq: usize, seed: u64) -> LmBatch {
    let mut rng = substream(seed, "test-batch");
    let windows: Vec<Vec<usize>> = (0..batch)
        .map(|_| (0..=seq).map(|_| rng.random_range(0..config.vocab_size)).collect())
        .collect();
    LmBatch::from_windows(&windows).expect("valid windows")
}

pub fn random_scores(config: &ModelConfig, seed: u64) -> SaliencyScores {
    let mut rng = substream(seed, "test-scores");
    SaliencyScores {
        layers: config
            .d_ffn
            .iter()
            .map(|&f| {
                let s = normal(&mut rng, &[f], 1.0).into_data();
                LayerScores {
                    raw_mag: s.iter().map(|v| v.abs()).collect(),
                    raw_jac: vec![0.0; f],
                    score: s,
                    normalization: None,
                }
            })
            .collect(),
    }
}

/// The combined loss of a random tiny model, ready for a gradient check.
pub struct CombinedCase {
    pub objective: Objective,
    pub feed: Feed,
}

pub fn combined_case(seed: u64, source: MaskSource) -> CombinedCase {
    let config = tiny_config();
    let ckpt = Checkpoint::init(config.clone(), seed).expect("init");
    let batch = random_batch(&config, 2, 6, seed);
    let scores = random_scores(&config, seed);
    let mut rng = substream(seed, "test-objective");
    let thresholds: Vec<f64> = (0..config.n_layers).map(|_| rng.random_range(-0.5..0.5)).collect();
    let temperature = rng.random_range(0.5..2.0);
    let objective = Objective {
        config,
        batch: batch.batch,
        seq: batch.seq,
        baseline_ce: rng.random_range(2.0..3.0),
        alpha: rng.random_range(0.0..=1.0),
        target_fraction: rng.random_range(0.2..0.9),
        source,
    };
    let feed = objective
        .feed(&ckpt, &batch, &scores, &thresholds, temperature)
        .expect("feed");
    CombinedCase { objective, feed }
}

/// Mean cross-entropy of a tiny model with every base weight trainable.
pub struct LmLoss {
    pub config: ModelConfig,
    pub batch: usize,
    pub seq: usize,
}

impl GraphBuilder for LmLoss {
    fn build<R: Real>(&self, g: &mut Graph<R>) -> Result<NodeId> {
        let lm = build_lm(
            g,
            &self.config,
            &LmGraphOptions {
                batch: self.batch,
                seq: self.seq,
                trainable: Trainable::Base,
                adapter: None,
                masks: None,
            },
        )?;
        Ok(lm.loss)
    }
}

pub fn lm_feed(ckpt: &Checkpoint, batch: &LmBatch) -> Feed {
    let mut feed = Feed::new()
        .index(TOKENS, batch.tokens.clone())
        .index(POSITIONS, batch.positions.clone())
        .index(TARGETS, batch.targets.clone());
    for (k, v) in ckpt.f32_tensors().expect("f32 weights") {
        feed = feed.real(&k, v.cast());
    }
    feed
}

/// Uppercase-only and lowercase-only corpora.
pub fn two_domain_corpora() -> (TokenStream, TokenStream) {
    let a = "CARDIACARRESTPATIENTDOSAGEINTRAVENOUSSALINE".repeat(40);
    let b = "saucepanwhiskbraisesimmerskilletcolander".repeat(40);
    (
        TokenStream::from_text("upper", &a, Split::default()).expect("upper corpus"),
        TokenStream::from_text("lower", &b, Split::default()).expect("lower corpus"),
    )
}

/// One layer, two FFN neurons, attention switched off. Uppercase bytes embed
/// along axis 0 and drive neuron 0; lowercase bytes embed along axis 1 and
/// drive neuron 1. Each neuron sits near zero on the other alphabet.
pub fn two_domain_model() -> Checkpoint {
    use salprune::model::{names, Weight};
    let config = ModelConfig::uniform(salprune::data::ByteTokenizer::VOCAB_SIZE, 16, 1, 4, 1, 2);
    let mut ckpt = Checkpoint::init(config.clone(), 0).expect("init");
    let d = config.d_model;
    let set = |ckpt: &mut Checkpoint, name: &str, shape: Vec<usize>, data: Vec<f32>| {
        ckpt.set(name, Weight::F32(Tensor::new(shape, data).expect("shape")))
            .expect("set");
    };
    let mut emb = vec![0.0f32; config.vocab_size * d];
    for b in b'A'..=b'Z' {
        emb[b as usize * d] = 3.0;
    }
    for b in b'a'..=b'z' {
        emb[b as usize * d + 1] = 3.0;
    }
    set(&mut ckpt, names::TOK_EMB, vec![config.vocab_size, d], emb);
    set(&mut ckpt, names::POS_EMB, vec![config.context_length, d], vec![0.0; config.context_length * d]);
    for w in [names::wq(0), names::wk(0), names::wv(0), names::wo(0)] {
        set(&mut ckpt, &w, vec![d, d], vec![0.0; d * d]);
    }
    let mut up = vec![0.0f32; 2 * d];
    up[0] = 4.0;
    up[d + 1] = 4.0;
    set(&mut ckpt, &names::up(0), vec![2, d], up);
    set(&mut ckpt, &names::up_bias(0), vec![2], vec![0.0; 2]);
    ckpt
}
