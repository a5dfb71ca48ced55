//! Edge-popup units that don't need the full dataset: score init statistics,
//! binarization semantics, straight-through identity, and descent behavior.

mod common;

use impresslearn::backbone::{
    backward_wrt_effective_weights, cross_entropy_loss, forward, init_backbone, ArchSpec,
    BackboneNet,
};
use impresslearn::edgepopup::{binarize_topk, init_scores, score_gradients, ScoreSet};
use impresslearn::Error;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lenet() -> BackboneNet {
    init_backbone(&ArchSpec::lenet_300_100(), 1).unwrap()
}

#[test]
fn score_init_is_deterministic_and_seed_sensitive() {
    let net = lenet();
    let a = init_scores(&net, 3);
    let b = init_scores(&net, 3);
    assert_eq!(a.checksum(), b.checksum());
    let c = init_scores(&net, 4);
    assert_ne!(a.checksum(), c.checksum());
    for (s, w) in a.scores.iter().zip(net.weights()) {
        assert_eq!(s.dim(), w.dim());
    }
}

#[test]
fn scores_from_different_seeds_are_uncorrelated() {
    let net = lenet();
    let a = init_scores(&net, 10);
    let b = init_scores(&net, 11);
    // sample Pearson r over the 235,200-entry first layer
    let xa = a.scores[0].as_slice().unwrap();
    let xb = b.scores[0].as_slice().unwrap();
    let n = xa.len() as f64;
    let ma: f64 = xa.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb: f64 = xb.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in xa.iter().zip(xb) {
        let dx = x as f64 - ma;
        let dy = y as f64 - mb;
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    let r = cov / (va.sqrt() * vb.sqrt());
    assert!(r.abs() < 0.05, "correlation {r}");
}

#[test]
fn binarize_hand_case_top_two_of_four() {
    let net = init_backbone(&ArchSpec::new(vec![4, 1]).unwrap(), 1).unwrap();
    let scores = ScoreSet {
        scores: vec![ndarray::array![[0.9f32, 0.1, 0.5, 0.3]]],
        init_seed: 0,
    };
    let _ = &net;
    let mask = binarize_topk(&scores, 0.5).unwrap();
    let bits: Vec<bool> = (0..4).map(|i| mask.layers[0].get(i)).collect();
    assert_eq!(bits, vec![true, false, true, false]);
}

#[test]
fn binarize_exact_count_on_large_uniform_layer() {
    let net = lenet();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let scores = ScoreSet {
        scores: net
            .weights()
            .iter()
            .map(|w| Array2::from_shape_fn(w.dim(), |_| rng.gen_range(-1.0f32..1.0)))
            .collect(),
        init_seed: 8,
    };
    let mask = binarize_topk(&scores, 0.9).unwrap();
    assert_eq!(mask.layers[0].count_ones(), 23_520); // round(0.1 · 235,200)
    assert_eq!(mask.layers[1].count_ones(), 3_000);
    assert_eq!(mask.layers[2].count_ones(), 100);
}

#[test]
fn binarize_degenerate_and_error_cases() {
    let scores = ScoreSet {
        scores: vec![ndarray::array![[0.5f32, -0.5, 0.25]]],
        init_seed: 0,
    };
    // k = n: everything kept
    let all = binarize_topk(&scores, 0.001).unwrap();
    assert_eq!(all.layers[0].count_ones(), 3);
    // k = 0: refuse rather than emit a dead layer
    match binarize_topk(&scores, 0.99) {
        Err(Error::LayerFullyMasked { layer: 0, .. }) => {}
        other => panic!("expected LayerFullyMasked, got {other:?}"),
    }
}

#[test]
fn binarize_breaks_ties_to_smallest_index() {
    let scores = ScoreSet {
        scores: vec![ndarray::array![[0.5f32, 0.5, 0.5, 0.5]]],
        init_seed: 0,
    };
    let mask = binarize_topk(&scores, 0.5).unwrap();
    let bits: Vec<bool> = (0..4).map(|i| mask.layers[0].get(i)).collect();
    assert_eq!(bits, vec![true, true, false, false]);
}

#[test]
fn straight_through_is_exactly_grad_times_weight() {
    let net = init_backbone(&ArchSpec::new(vec![5, 4, 3]).unwrap(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let grad_eff: Vec<Array2<f32>> = net
        .weights()
        .iter()
        .map(|w| Array2::from_shape_fn(w.dim(), |_| rng.gen_range(-1.0f32..1.0)))
        .collect();
    let grads = score_gradients(&net, &grad_eff).unwrap();
    for ((g, ge), w) in grads.iter().zip(&grad_eff).zip(net.weights()) {
        for ((gv, &gev), &wv) in g.iter().zip(ge.iter()).zip(w.iter()) {
            assert_eq!(*gv, gev * wv); // exact, no tolerance
        }
    }
}

#[test]
fn one_small_sgd_step_descends_on_the_batch() {
    // statistical descent check: tiny-lr score step should not increase the
    // batch loss in at least 95 of 100 random trials
    let mut passes = 0;
    for trial in 0..100u64 {
        let net = init_backbone(&ArchSpec::new(vec![8, 10, 5]).unwrap(), trial).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(trial ^ 0xbeef);
        let batch = Array2::from_shape_fn((16, 8), |_| rng.gen_range(0.0f32..1.0));
        let labels: Vec<usize> = (0..16).map(|_| rng.gen_range(0..5)).collect();
        let mut scores = init_scores(&net, trial);
        let sparsity = 0.5;

        let mask = binarize_topk(&scores, sparsity).unwrap();
        let (logits, cache) = forward(&net, &mask.to_effective(), &batch).unwrap();
        let (loss0, grad_logits) = cross_entropy_loss(&logits, &labels).unwrap();
        let grad_eff = backward_wrt_effective_weights(&net, &cache, &grad_logits).unwrap();
        let grads = score_gradients(&net, &grad_eff).unwrap();
        let lr = 1e-4f32;
        for (s, g) in scores.scores.iter_mut().zip(&grads) {
            s.zip_mut_with(g, |sv, &gv| *sv -= lr * gv);
        }
        let mask1 = binarize_topk(&scores, sparsity).unwrap();
        let (logits1, _) = forward(&net, &mask1.to_effective(), &batch).unwrap();
        let (loss1, _) = cross_entropy_loss(&logits1, &labels).unwrap();
        if loss1 <= loss0 + 1e-7 {
            passes += 1;
        }
    }
    assert!(passes >= 95, "descent in only {passes}/100 trials");
}
