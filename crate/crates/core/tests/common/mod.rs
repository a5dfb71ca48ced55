//! Shared f64 reference implementations used as independent oracles by the
//! gradient and numerics tests. Everything here recomputes results from first
//! principles in double precision, deliberately avoiding the library's own
//! forward/backward code paths.

#![allow(dead_code)]

use impresslearn::backbone::{BackboneNet, EffectiveMask};
use ndarray::Array2;

/// Effective weights (backbone ⊙ mask) promoted to f64, one matrix per layer.
pub fn effective_f64(net: &BackboneNet, mask: &EffectiveMask) -> Vec<Vec<Vec<f64>>> {
    net.weights()
        .iter()
        .zip(&mask.layers)
        .map(|(w, m)| {
            let (rows, cols) = w.dim();
            (0..rows)
                .map(|r| {
                    (0..cols)
                        .map(|c| w[[r, c]] as f64 * m[[r, c]] as f64)
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Forward pass in f64: ReLU on hidden layers, identity on the output layer.
/// Returns logits for a single input vector.
pub fn forward_f64(
    eff: &[Vec<Vec<f64>>],
    biases: &[Vec<f64>],
    input: &[f64],
) -> Vec<f64> {
    let depth = eff.len();
    let mut act: Vec<f64> = input.to_vec();
    for (i, (w, b)) in eff.iter().zip(biases).enumerate() {
        let mut z: Vec<f64> = w
            .iter()
            .zip(b)
            .map(|(row, &bias)| {
                row.iter().zip(&act).map(|(&wv, &xv)| wv * xv).sum::<f64>() + bias
            })
            .collect();
        if i + 1 < depth {
            for v in &mut z {
                *v = v.max(0.0);
            }
        }
        act = z;
    }
    act
}

pub fn biases_f64(net: &BackboneNet) -> Vec<Vec<f64>> {
    net.biases()
        .iter()
        .map(|b| b.iter().map(|&v| v as f64).collect())
        .collect()
}

/// Numerically stable softmax cross-entropy in f64 for one example.
pub fn cross_entropy_f64(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    log_sum - logits[label]
}

/// Mean cross-entropy over a batch, all in f64.
pub fn batch_loss_f64(
    eff: &[Vec<Vec<f64>>],
    biases: &[Vec<f64>],
    inputs: &Array2<f32>,
    labels: &[usize],
) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for (row, &label) in inputs.outer_iter().zip(labels) {
        let x: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        let logits = forward_f64(eff, biases, &x);
        total += cross_entropy_f64(&logits, label);
    }
    total / n as f64
}

/// Central finite difference of `f` with step `h`.
pub fn central_diff<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Relative error with an absolute floor so near-zero entries are compared
/// absolutely instead of blowing up the ratio.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-3)
}

/// Softmax in f64.
pub fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Shannon entropy (natural log) of a probability vector.
pub fn entropy_f64(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}
