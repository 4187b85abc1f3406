mod common;

use common::{normal, tiny_config};
use proptest::prelude::*;
use salprune::autodiff::Tensor;
use salprune::data::spt::SptFile;
use salprune::data::{ByteTokenizer, Split, TokenStream};
use salprune::eval::perplexity;
use salprune::model::{forward_lm, train_baseline, Checkpoint, ModelConfig, TrainHyper, Weight};
use salprune::quant::{
    dequantize_block, q4_byte_len, quantize_block, quantize_checkpoint, unsaturated_error_bound, QuantPolicy,
    QuantTensor, BLOCK_BYTES, BLOCK_LEN,
};
use salprune::rng::substream;

#[test]
fn policy_none_is_bit_identical() {
    let ckpt = Checkpoint::init(tiny_config(), 1).unwrap();
    let (q, report) = quantize_checkpoint(&ckpt, QuantPolicy::None).unwrap();
    assert_eq!(q.to_bytes().unwrap(), ckpt.to_bytes().unwrap());
    assert!(report.quantized.is_empty());
    assert_eq!(report.compression_ratio, 1.0);
}

#[test]
fn matmul_policy_covers_only_matrices() {
    let cfg = ModelConfig::uniform(ByteTokenizer::VOCAB_SIZE, 16, 2, 64, 4, 128);
    let ckpt = Checkpoint::init(cfg, 2).unwrap();
    let (q, report) = quantize_checkpoint(&ckpt, QuantPolicy::Matmul).unwrap();
    for (name, w) in q.tensors() {
        let expect_q4 = QuantPolicy::Matmul.covers(name);
        assert_eq!(matches!(w, Weight::Q4(_)), expect_q4, "{name}");
        assert_eq!(w.shape(), ckpt.weight(name).unwrap().shape());
    }
    assert!(!QuantPolicy::Matmul.covers("tok_emb"));
    assert!(!QuantPolicy::Matmul.covers("layers.0.ffn.up_bias"));
    let ratio = report.covered_q4_bytes as f64 / report.covered_f32_bytes as f64;
    assert!((ratio / (18.0 / 128.0) - 1.0).abs() <= 0.02, "{ratio}");
    let f32_file = ckpt.to_bytes().unwrap().len();
    let q4_file = q.to_bytes().unwrap();
    assert!(q4_file.len() * 2 < f32_file);
    let payload: usize = SptFile::from_bytes(&q4_file).unwrap().tensors.iter().map(|t| t.bytes.len()).sum();
    assert_eq!(payload, report.covered_q4_bytes + report.remainder_bytes);
}

#[test]
fn quantized_checkpoint_round_trips_through_spt() {
    let ckpt = Checkpoint::init(tiny_config(), 3).unwrap();
    let (q, _) = quantize_checkpoint(&ckpt, QuantPolicy::Matmul).unwrap();
    assert!(q.is_quantized());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("q.spt");
    q.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
    let p = [1, 5, 9, 2];
    assert_eq!(forward_lm(&q, &p, None).unwrap(), forward_lm(&back, &p, None).unwrap());
    // quantizing again leaves q4 tensors as they are
    let (qq, _) = quantize_checkpoint(&q, QuantPolicy::Matmul).unwrap();
    assert_eq!(qq.to_bytes().unwrap(), q.to_bytes().unwrap());
}

#[test]
fn row_dot_matches_dequantized_rows() {
    let mut rng = substream(4, "q4-rows");
    let t = normal(&mut rng, &[5, 70], 1.0).cast::<f32>();
    let q = QuantTensor::quantize(&t).unwrap();
    assert_eq!(q.blocks().len(), 5 * 3);
    assert_eq!(q4_byte_len(&[5, 70]).unwrap(), 15 * BLOCK_BYTES);
    let dq = q.dequantize();
    assert_eq!(dq.shape(), &[5, 70]);
    let x = normal(&mut rng, &[70], 1.0).cast::<f32>();
    for r in 0..5 {
        let row = &dq.data()[r * 70..(r + 1) * 70];
        let naive: f64 = row.iter().zip(x.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((q.row_dot(r, x.data()) as f64 - naive).abs() <= 1e-4 * (1.0 + naive.abs()));
    }
    let back = QuantTensor::from_bytes(&[5, 70], &q.to_bytes()).unwrap();
    assert_eq!(back, q);
    assert!(QuantTensor::from_bytes(&[5, 70], &q.to_bytes()[1..]).is_err());
}

#[test]
fn quantized_toy_model_keeps_perplexity() {
    let text = std::fs::read_to_string(common::repo_root().join("data/toy_clinical.txt")).unwrap();
    let stream = TokenStream::from_text("clinical", &text[..40_000], Split::default()).unwrap();
    let cfg = ModelConfig::uniform(ByteTokenizer::VOCAB_SIZE, 32, 1, 64, 4, 128);
    let hyper = TrainHyper {
        steps: 250,
        seq: 32,
        seed: 5,
        ..TrainHyper::default()
    };
    let ckpt = train_baseline(&cfg, &stream, &hyper).unwrap();
    let (q, _) = quantize_checkpoint(&ckpt, QuantPolicy::Matmul).unwrap();
    let val = &stream.validation()[..2000];
    let (pf, pq) = (perplexity(&ckpt, val).unwrap(), perplexity(&q, val).unwrap());
    assert!((pq / pf - 1.0).abs() <= 0.15, "f32 {pf} q4 {pq}");
}

#[test]
fn quantized_weights_cannot_be_trained() {
    let ckpt = Checkpoint::init(tiny_config(), 6).unwrap();
    let (q, _) = quantize_checkpoint(&ckpt, QuantPolicy::Matmul).unwrap();
    assert!(q.f32_tensors().is_err());
}

fn block() -> impl Strategy<Value = [f32; BLOCK_LEN]> {
    (prop::array::uniform32(-1.0f32..1.0), -3.0f64..2.0)
        .prop_map(|(w, e)| w.map(|x| x * 10f64.powf(e) as f32))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// Elements that did not saturate stay within half a step; saturated
    /// ones within a full step.
    #[test]
    fn reconstruction_error_by_code(w in block()) {
        let b = quantize_block(&w).unwrap();
        let max = w.iter().copied().fold(0.0f32, |a, x| if x.abs() > a.abs() { x } else { a });
        let d = max / -8.0;
        let half = unsaturated_error_bound(&b, d) + f32::EPSILON * max.abs();
        let w_hat = dequantize_block(&b);
        for i in 0..BLOCK_LEN {
            let err = (w[i] - w_hat[i]).abs();
            if b.code(i) == 15 && (w[i] / d) > 7.0 {
                prop_assert!(err <= 2.0 * half, "{i}: {err} > {}", 2.0 * half);
            } else {
                prop_assert!(err <= half, "{i}: {err} > {half}");
            }
        }
    }

    #[test]
    fn tensor_requantization_is_a_fixed_point(rows in 1usize..4, cols in 1usize..80, seed in any::<u64>()) {
        let mut rng = substream(seed, "q4-fixed");
        let t: Tensor<f32> = normal(&mut rng, &[rows, cols], 1.0).cast();
        let q = QuantTensor::quantize(&t).unwrap();
        let again = QuantTensor::quantize(&q.dequantize()).unwrap();
        prop_assert_eq!(q.to_bytes(), again.to_bytes());
    }
}
