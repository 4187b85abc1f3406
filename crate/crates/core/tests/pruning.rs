mod common;

use common::{random_batch, random_scores, tiny_config};
use proptest::prelude::*;
use rand::Rng;
use salprune::data::CalibrationSet;
use salprune::mask::{binarize, kept_fraction, optimize, MaskConfig, OptimizeStatus};
use salprune::model::{forward_lm, names, Checkpoint, ModelConfig, Weight};
use salprune::prune::{extract, plan, verify, PrunePlan, EQUIVALENCE_TOLERANCE};
use salprune::rng::substream;
use salprune::saliency::SaliencyStats;

fn prompts(config: &ModelConfig, n: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = substream(seed, "prune-prompts");
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=config.context_length);
            (0..len).map(|_| rng.random_range(0..config.vocab_size)).collect()
        })
        .collect()
}

fn calibration(config: &ModelConfig, n: usize, seed: u64) -> CalibrationSet {
    let b = random_batch(config, n, config.context_length - 1, seed);
    let sequences: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut w = b.tokens[i * b.seq..(i + 1) * b.seq].to_vec();
            w.push(b.targets[(i + 1) * b.seq - 1]);
            w
        })
        .collect();
    CalibrationSet {
        offsets: (0..n).collect(),
        len: config.context_length,
        sequences,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn extraction_matches_masked_forward(seed in any::<u64>(), keep in 0.0f64..1.0) {
        let ckpt = Checkpoint::init(tiny_config(), seed).unwrap();
        let cfg = ckpt.config().clone();
        let mut rng = substream(seed, "prune-mask");
        let masks: Vec<Vec<f32>> = cfg
            .d_ffn
            .iter()
            .map(|&f| (0..f).map(|_| if rng.random_bool(keep) { 1.0 } else { 0.0 }).collect())
            .collect();
        let masked = ckpt.with_masks(masks.clone()).unwrap();
        let p = plan(&masked).unwrap();
        let pruned = extract(&masked, &p).unwrap();
        let kept: usize = masks.iter().flatten().filter(|&&m| m == 1.0).count();
        let removed = cfg.total_ffn_neurons() - kept;
        prop_assert_eq!(pruned.config().total_ffn_neurons(), kept);
        prop_assert_eq!(pruned.param_count(), masked.param_count() - removed * (2 * cfg.d_model + 1));
        prop_assert_eq!(p.kept_fraction(), kept_fraction(&cfg, &masks).unwrap());
        let r = verify(&masked, &pruned, &prompts(&cfg, 10, seed)).unwrap();
        prop_assert!(r.passed, "max diff {}", r.max_abs_diff);
    }
}

#[test]
fn kept_neurons_keep_their_order() {
    let ckpt = Checkpoint::init(tiny_config(), 1).unwrap();
    let masks = vec![vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0], vec![1.0; 6]];
    let masked = ckpt.clone().with_masks(masks).unwrap();
    let p = plan(&masked).unwrap();
    assert_eq!(p.layers[0].kept, vec![1, 3, 4]);
    let pruned = extract(&masked, &p).unwrap();
    let d = ckpt.config().d_model;
    let up = ckpt.f32(&names::up(0)).unwrap().data();
    let new_up = pruned.f32(&names::up(0)).unwrap().data();
    assert_eq!(&new_up[..d], &up[d..2 * d]);
    assert_eq!(&new_up[2 * d..3 * d], &up[4 * d..5 * d]);
    assert_eq!(pruned.f32(&names::up(1)).unwrap(), ckpt.f32(&names::up(1)).unwrap());
}

#[test]
fn fully_pruned_layer_still_runs() {
    let ckpt = Checkpoint::init(tiny_config(), 2).unwrap();
    let masked = ckpt.with_masks(vec![vec![0.0; 6], vec![1.0; 6]]).unwrap();
    let pruned = extract(&masked, &plan(&masked).unwrap()).unwrap();
    assert_eq!(pruned.config().d_ffn, vec![0, 6]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.spt");
    pruned.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let pr = prompts(back.config(), 5, 2);
    assert!(verify(&masked, &back, &pr).unwrap().passed);
}

#[test]
fn verify_flags_a_wrong_extraction() {
    let ckpt = Checkpoint::init(tiny_config(), 3).unwrap();
    let masked = ckpt.with_masks(vec![vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0], vec![1.0; 6]]).unwrap();
    let mut pruned = extract(&masked, &plan(&masked).unwrap()).unwrap();
    let mut down = pruned.f32(&names::down(0)).unwrap().clone();
    down.data_mut()[0] += 0.5;
    pruned.set(&names::down(0), Weight::F32(down)).unwrap();
    let r = verify(&masked, &pruned, &prompts(masked.config(), 5, 3)).unwrap();
    assert!(!r.passed && r.max_abs_diff > EQUIVALENCE_TOLERANCE);
    assert!(verify(&masked, &pruned, &Vec::<Vec<usize>>::new()).is_err());
}

#[test]
fn plan_needs_masks_of_the_right_shape() {
    let cfg = tiny_config();
    assert!(plan(&Checkpoint::init(cfg.clone(), 4).unwrap()).is_err());
    assert!(PrunePlan::from_masks(&cfg, &[vec![1.0; 6]]).is_err());
    assert!(PrunePlan::from_masks(&cfg, &[vec![1.0; 6], vec![0.5; 6]]).is_err());
}

#[test]
fn optimizer_hits_the_edge_budget_without_task_term() {
    let cfg = ModelConfig::uniform(16, 8, 2, 8, 2, 32);
    let ckpt = Checkpoint::init(cfg.clone(), 5).unwrap();
    let cal = calibration(&cfg, 8, 5);
    let scores = SaliencyStats::of_batch(&ckpt, &cal.sequences)
        .unwrap()
        .finalize()
        .unwrap()
        .normalized();
    for target in [0.25, 0.5, 0.75] {
        let config = MaskConfig {
            alpha: 0.0,
            target_fraction: target,
            batch: 4,
            ..MaskConfig::default()
        };
        let r = optimize(&ckpt, &scores, &cal, &config).unwrap();
        assert!((r.kept_fraction - target).abs() <= 0.02, "{target}: {}", r.kept_fraction);
        assert_eq!(r.status, OptimizeStatus::Converged);
        assert_eq!(r.trace.len(), config.iterations);
        assert_eq!(r.state.binary, binarize(&scores, &r.state.thresholds));
        for w in r.trace.windows(2) {
            assert!(w[1].temperature < w[0].temperature);
        }
        for b in &r.trace {
            assert!((b.combined - b.resource_loss).abs() <= 1e-12);
            assert!((b.resource_loss - (b.kept_fraction - target).powi(2)).abs() <= 1e-7);
        }
        let masked = ckpt.clone().with_masks(r.state.binary.clone()).unwrap();
        let pruned = extract(&masked, &plan(&masked).unwrap()).unwrap();
        assert!(verify(&masked, &pruned, &cal.sequences).unwrap().passed);
    }
}

#[test]
fn optimizer_is_deterministic_and_checks_inputs() {
    let cfg = tiny_config();
    let ckpt = Checkpoint::init(cfg.clone(), 6).unwrap();
    let cal = calibration(&cfg, 4, 6);
    let scores = random_scores(&cfg, 6).normalized();
    let config = MaskConfig {
        iterations: 10,
        batch: 2,
        ..MaskConfig::default()
    };
    let a = optimize(&ckpt, &scores, &cal, &config).unwrap();
    let b = optimize(&ckpt, &scores, &cal, &config).unwrap();
    assert_eq!(a, b);
    let narrow = random_scores(&ModelConfig::uniform(16, 8, 2, 8, 2, 5), 6);
    assert!(optimize(&ckpt, &narrow, &cal, &config).is_err());
    let bad = MaskConfig { alpha: 1.5, ..config.clone() };
    assert!(optimize(&ckpt, &scores, &cal, &bad).is_err());
    let bad = MaskConfig { target_fraction: 0.0, ..config };
    assert!(optimize(&ckpt, &scores, &cal, &bad).is_err());
}

#[test]
fn masked_logits_ignore_pruned_neurons() {
    let ckpt = Checkpoint::init(tiny_config(), 7).unwrap();
    let masks = vec![vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0, 1.0, 1.0, 1.0]];
    let mut changed = ckpt.clone();
    let mut up = changed.f32(&names::up(0)).unwrap().clone();
    let d = ckpt.config().d_model;
    for v in &mut up.data_mut()[d..2 * d] {
        *v *= -3.0;
    }
    changed.set(&names::up(0), Weight::F32(up)).unwrap();
    let p = [3, 1, 4, 1, 5];
    assert_eq!(
        forward_lm(&ckpt, &p, Some(&masks)).unwrap(),
        forward_lm(&changed, &p, Some(&masks)).unwrap()
    );
}
