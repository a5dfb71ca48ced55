//! The edge-popup supermask trainer: per-weight scores, top-k binarization
//! on the forward pass, straight-through gradients on the backward pass.
//! Backbone weights are never touched.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{
    backward_wrt_effective_weights, cross_entropy_loss, forward, BackboneNet, EffectiveMask,
};
use crate::checksum::Fnv1a;
use crate::error::{Error, Result};
use crate::impressions::{BinaryMask, MaskLayer, Provenance};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::tasks::{Split, Task};

/// Per-weight popup scores, one real matrix per backbone layer.
#[derive(Clone)]
pub struct ScoreSet {
    pub scores: Vec<Array2<f32>>,
    pub init_seed: u64,
}

impl ScoreSet {
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.update_u64(self.init_seed);
        for s in &self.scores {
            h.update_f32_slice(s.as_slice().unwrap());
        }
        h.finish()
    }
}

/// Hyperparameters for one supermask training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupermaskHyper {
    pub sparsity: f32,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Optional cap on training items per epoch, for quick runs.
    #[serde(default)]
    pub max_train_items: Option<usize>,
}

impl Default for SupermaskHyper {
    /// MNIST-scale defaults: s=0.9, RMSprop lr 0.002, batch 128, 10 epochs.
    fn default() -> Self {
        SupermaskHyper {
            sparsity: 0.9,
            optimizer: OptimizerConfig::rmsprop(0.002),
            epochs: 10,
            batch_size: 128,
            max_train_items: None,
        }
    }
}

/// Scores drawn from the same Kaiming-normal scheme as the weights,
/// deterministic in `seed`.
pub fn init_scores(net: &BackboneNet, seed: u64) -> ScoreSet {
    let arch = net.arch();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = (0..arch.depth())
        .map(|i| {
            let (fan_out, fan_in) = arch.layer_shape(i);
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            let data: Vec<f32> = (0..fan_out * fan_in)
                .map(|_| dist.sample(&mut rng) as f32)
                .collect();
            Array2::from_shape_vec((fan_out, fan_in), data).unwrap()
        })
        .collect();
    ScoreSet {
        scores,
        init_seed: seed,
    }
}

/// Heaviside step of edge-popup: keep the `round((1-s)·n_i)` highest-scoring
/// weights per layer. Score ties break to the smallest flat index.
pub fn binarize_topk(scores: &ScoreSet, sparsity: f32) -> Result<BinaryMask> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Config(format!("sparsity {sparsity} outside (0,1)")));
    }
    let mut layers = Vec::with_capacity(scores.scores.len());
    for (i, s) in scores.scores.iter().enumerate() {
        let flat = s.as_slice().unwrap();
        let n = flat.len();
        let keep = ((1.0 - sparsity as f64) * n as f64).round() as usize;
        if keep == 0 {
            return Err(Error::LayerFullyMasked { layer: i, sparsity });
        }
        let mut layer = MaskLayer::zeros(s.nrows(), s.ncols());
        if keep >= n {
            for idx in 0..n {
                layer.set(idx);
            }
        } else {
            let mut order: Vec<u32> = (0..n as u32).collect();
            order.select_nth_unstable_by(keep - 1, |&a, &b| {
                flat[b as usize]
                    .total_cmp(&flat[a as usize])
                    .then(a.cmp(&b))
            });
            for &idx in &order[..keep] {
                layer.set(idx as usize);
            }
        }
        layers.push(layer);
    }
    Ok(BinaryMask {
        layers,
        sparsity,
        provenance: Provenance::Random { seed: scores.init_seed },
    })
}

/// Straight-through estimator: the binarization is treated as identity, so
/// every score's gradient is `∂L/∂(M⊙W) · W` elementwise, including scores
/// whose edges are currently masked out.
pub fn score_gradients(
    net: &BackboneNet,
    grad_eff: &[Array2<f32>],
) -> Result<Vec<Array2<f32>>> {
    if grad_eff.len() != net.depth() {
        return Err(Error::Dimension("gradient depth mismatch".into()));
    }
    grad_eff
        .iter()
        .zip(net.weights())
        .map(|(g, w)| {
            if g.dim() != w.dim() {
                return Err(Error::Dimension("gradient layer shape mismatch".into()));
            }
            Ok(g * w)
        })
        .collect()
}

/// Trains one supermask with edge-popup. Deterministic in
/// Per-layer gain applied during score training only. Keeping a `(1-s)`
/// fraction of Kaiming-normal weights attenuates layer variance by `(1-s)`;
/// compensating with `1/sqrt(1-s)` reproduces the scaled initialization the
/// edge-popup authors use at high sparsity. ReLU is positively homogeneous
/// and argmax is scale-invariant, so the trained mask is exactly the one
/// that a rescaled backbone would produce and evaluates identically on the
/// plain backbone.
pub fn train_gain(sparsity: f32) -> f32 {
    (1.0 / (1.0 - sparsity)).sqrt()
}

/// `(task, hyper, seed)`; the seed drives both score init and data order.
pub fn train_supermask(
    net: &BackboneNet,
    task: &Task,
    hyper: &SupermaskHyper,
    seed: u64,
) -> Result<BinaryMask> {
    let mut scores = init_scores(net, seed);
    let shapes: Vec<_> = scores.scores.iter().map(|s| s.dim()).collect();
    let mut opt = Optimizer::new(hyper.optimizer, &shapes);
    let gain = train_gain(hyper.sparsity);
    for epoch in 0..hyper.epochs as u64 {
        let mut seen = 0usize;
        for batch in task.batches(Split::Train, hyper.batch_size, seed, epoch)? {
            if let Some(limit) = hyper.max_train_items {
                if seen >= limit {
                    break;
                }
                seen += batch.labels.len();
            }
            let mask = binarize_topk(&scores, hyper.sparsity)?;
            let mut eff = mask.to_effective();
            for layer in &mut eff.layers {
                *layer *= gain;
            }
            let (logits, cache) = forward(net, &eff, &batch.inputs)?;
            let (_, grad_logits) = cross_entropy_loss(&logits, &batch.labels)?;
            let grad_eff = backward_wrt_effective_weights(net, &cache, &grad_logits)?;
            let grads = score_gradients(net, &grad_eff)?;
            opt.step(&mut scores.scores, &grads);
        }
    }
    let mut mask = binarize_topk(&scores, hyper.sparsity)?;
    mask.provenance = Provenance::Heterogeneous {
        task_id: task.id().unwrap_or("unnamed").to_string(),
        seed,
    };
    Ok(mask)
}

/// Top-1 accuracy on the task's validation split. Ties in the argmax
/// resolve to the smallest class index.
pub fn evaluate_mask(net: &BackboneNet, mask: &EffectiveMask, task: &Task) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for batch in task.batches(Split::Val, 256, 0, 0)? {
        let (logits, _) = forward(net, mask, &batch.inputs)?;
        for (row, &label) in logits.outer_iter().zip(&batch.labels) {
            let mut best = 0usize;
            let mut best_v = row[0];
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best = j;
                    best_v = v;
                }
            }
            if best == label {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Convenience: evaluate a binary mask by promoting it first.
pub fn evaluate_binary_mask(net: &BackboneNet, mask: &BinaryMask, task: &Task) -> Result<f64> {
    evaluate_mask(net, &mask.to_effective(), task)
}
