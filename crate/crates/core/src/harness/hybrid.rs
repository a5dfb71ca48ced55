//! Hybrid mode: α-combination of basis-masks for the hidden layers, a fresh
//! edge-popup binary mask for the output layer, optimized jointly.

use ndarray::Array2;

use crate::alphatrain::{init_alpha, mask_inner_products, AlphaHyper, AlphaMatrix};
use crate::backbone::{
    backward_wrt_effective_weights, cross_entropy_loss, forward, BackboneNet, EffectiveMask,
};
use crate::edgepopup::{binarize_topk, init_scores, train_gain, ScoreSet, SupermaskHyper};
use crate::error::{Error, Result};
use crate::impressions::{BasisSet, BinaryMask};
use crate::optim::Optimizer;
use crate::tasks::{Split, Task};

/// Result of one hybrid training run: hidden-layer coefficients (|ℳ| × d−1)
/// plus the dedicated output-layer mask.
pub struct HybridMask {
    pub alpha_hidden: AlphaMatrix,
    pub output_mask: BinaryMask,
}

impl HybridMask {
    /// Assembles the full effective mask for evaluation.
    pub fn to_effective(&self, net: &BackboneNet, basis: &BasisSet) -> Result<EffectiveMask> {
        let mut eff = combine_hidden(net, basis, &self.alpha_hidden)?;
        let out_layer = self.output_mask.to_effective().layers.pop().unwrap();
        eff.layers.push(out_layer);
        Ok(eff)
    }
}

/// `Σ_t α[t,i]·M^t_i` over hidden weight-layers only; the returned mask has
/// d−1 layers.
fn combine_hidden(
    net: &BackboneNet,
    basis: &BasisSet,
    alpha: &AlphaMatrix,
) -> Result<EffectiveMask> {
    basis.bind_check(net)?;
    let d = net.depth();
    if alpha.values.dim() != (basis.len(), d - 1) {
        return Err(Error::Dimension(format!(
            "hidden alpha is {:?}, expected ({}, {})",
            alpha.values.dim(),
            basis.len(),
            d - 1
        )));
    }
    let mut layers: Vec<Array2<f32>> = (0..d - 1)
        .map(|i| Array2::zeros(net.arch().layer_shape(i)))
        .collect();
    for (t, mask) in basis.masks.iter().enumerate() {
        for (i, layer) in layers.iter_mut().enumerate() {
            let a = alpha.values[[t, i]];
            if a == 0.0 {
                continue;
            }
            let flat = layer.as_slice_mut().unwrap();
            for idx in mask.layers[i].iter_ones() {
                flat[idx] += a;
            }
        }
    }
    Ok(EffectiveMask { layers })
}

/// Single-layer score set for the output layer, seeded like a full one.
fn init_output_scores(net: &BackboneNet, seed: u64) -> ScoreSet {
    let mut full = init_scores(net, seed);
    let last = full.scores.pop().unwrap();
    ScoreSet {
        scores: vec![last],
        init_seed: seed,
    }
}

/// Trains hidden-layer α and the output-layer supermask jointly: one
/// forward/backward per batch, then an α step followed by a score step.
pub fn train_hybrid(
    net: &BackboneNet,
    basis: &BasisSet,
    task: &Task,
    alpha_hyper: &AlphaHyper,
    mask_hyper: &SupermaskHyper,
    seed: u64,
) -> Result<HybridMask> {
    let d = net.depth();
    if d < 2 {
        return Err(Error::Config(
            "hybrid mode needs at least one hidden layer".into(),
        ));
    }
    basis.bind_check(net)?;
    let mut alpha = init_alpha(basis.len(), d - 1);
    alpha.task_id = task.id().unwrap_or("unnamed").to_string();
    let mut scores = init_output_scores(net, seed);
    let mut alpha_opt = Optimizer::new(alpha_hyper.optimizer, &[alpha.values.dim()]);
    let mut score_opt = Optimizer::new(mask_hyper.optimizer, &[scores.scores[0].dim()]);
    let out_w = &net.weights()[d - 1];
    for epoch in 0..alpha_hyper.epochs as u64 {
        for batch in task.batches(Split::Train, alpha_hyper.batch_size, seed, epoch)? {
            let out_mask = binarize_topk(&scores, mask_hyper.sparsity)?;
            let mut eff = combine_hidden(net, basis, &alpha)?;
            eff.layers
                .push(out_mask.to_effective().layers.pop().unwrap());
            // Same gain-compensated training regime as train_supermask and
            // train_alpha; evaluation stays unscaled.
            let gain = train_gain(mask_hyper.sparsity);
            for layer in &mut eff.layers {
                *layer *= gain;
            }
            let (logits, cache) = forward(net, &eff, &batch.inputs)?;
            let (_, grad_logits) = cross_entropy_loss(&logits, &batch.labels)?;
            let grad_eff = backward_wrt_effective_weights(net, &cache, &grad_logits)?;

            // alpha step over hidden columns; chain rule through the gain
            let full_grad = mask_inner_products(net, basis, &grad_eff)?;
            let mut hidden_grad = Array2::zeros((basis.len(), d - 1));
            for t in 0..basis.len() {
                for i in 0..d - 1 {
                    hidden_grad[[t, i]] = full_grad[[t, i]] * gain;
                }
            }
            let mut params = [std::mem::take(&mut alpha.values)];
            alpha_opt.step(&mut params, &[hidden_grad]);
            alpha.values = std::mem::take(&mut params[0]);

            // output-layer score step (straight-through)
            let score_grad = &grad_eff[d - 1] * out_w;
            score_opt.step(&mut scores.scores, &[score_grad]);
        }
    }
    let mut output_mask = binarize_topk(&scores, mask_hyper.sparsity)?;
    output_mask.provenance = crate::impressions::Provenance::Heterogeneous {
        task_id: alpha.task_id.clone(),
        seed,
    };
    Ok(HybridMask {
        alpha_hidden: alpha,
        output_mask,
    })
}
