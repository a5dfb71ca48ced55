//! Task-identity inference for the GN regime (identity given at training,
//! absent at inference): one-shot output-entropy minimization over a mask
//! library, and α-optimization over a basis set.

use ndarray::{Array2, Axis};
use serde::Serialize;

use crate::alphatrain::{train_alpha, AlphaHyper, AlphaMatrix};
use crate::backbone::{
    backward_wrt_effective_weights, forward, BackboneNet, EffectiveMask,
};
use crate::error::{Error, Result};
use crate::impressions::{BasisSet, BinaryMask};
use crate::tasks::Task;

/// A stored mask available for inference: a basis impression or a
/// precomputed α-combination for a non-basis task.
pub enum LibraryMask {
    Binary(BinaryMask),
    Effective(EffectiveMask),
}

impl LibraryMask {
    fn to_effective(&self) -> EffectiveMask {
        match self {
            LibraryMask::Binary(b) => b.to_effective(),
            LibraryMask::Effective(e) => e.clone(),
        }
    }
}

/// Ordered (identifier, mask) entries bound to one backbone.
pub struct MaskLibrary {
    pub entries: Vec<(String, LibraryMask)>,
    pub backbone_checksum: u64,
}

impl MaskLibrary {
    pub fn new(backbone_checksum: u64) -> Self {
        MaskLibrary {
            entries: Vec::new(),
            backbone_checksum,
        }
    }

    pub fn push(&mut self, id: impl Into<String>, mask: LibraryMask) -> Result<()> {
        let id = id.into();
        if self.entries.iter().any(|(e, _)| *e == id) {
            return Err(Error::Config(format!("duplicate library id {id}")));
        }
        self.entries.push((id, mask));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Mean Shannon entropy (natural log) of the model's output distribution
/// over the batch. Always in `[0, ln l]`.
pub fn output_entropy(net: &BackboneNet, mask: &EffectiveMask, batch: &Array2<f32>) -> Result<f64> {
    let (logits, _) = forward(net, mask, batch)?;
    Ok(batch_entropy(&logits).0)
}

/// Returns (mean entropy, d(mean entropy)/d logits).
fn batch_entropy(logits: &Array2<f32>) -> (f64, Array2<f32>) {
    let n = logits.nrows();
    let mut grad = logits.clone();
    let mut total = 0.0f64;
    for row in grad.axis_iter_mut(Axis(0)) {
        let mut row = row;
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        let mut h = 0.0f64;
        for v in row.iter_mut() {
            *v *= inv;
            let p = f64::from(*v);
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        total += h;
        // dH/dz_k = -p_k (ln p_k + H)
        for v in row.iter_mut() {
            let p = f64::from(*v);
            let term = if p > 0.0 { p.ln() + h } else { 0.0 };
            *v = (-p * term) as f32;
        }
    }
    let mean = total / n as f64;
    grad /= n as f32;
    (mean, grad)
}

/// Diagnostics from a one-shot inference call.
#[derive(Debug, Clone, Serialize)]
pub struct OneShotReport {
    pub predicted: String,
    /// Entropy gradient per library coefficient, in library order.
    pub coefficient_grads: Vec<(String, f64)>,
}

/// SupSup-style one-shot inference: form the uniform combination of all
/// library masks, take one entropy-gradient step w.r.t. the per-mask
/// coefficients, and pick the mask whose coefficient has the steepest
/// entropy decrease.
pub fn oneshot_entropy_infer(
    net: &BackboneNet,
    library: &MaskLibrary,
    batch: &Array2<f32>,
) -> Result<OneShotReport> {
    if library.is_empty() {
        return Err(Error::Config("empty mask library".into()));
    }
    if library.backbone_checksum != net.checksum() {
        return Err(Error::BackboneMismatch {
            expected: library.backbone_checksum,
            actual: net.checksum(),
        });
    }
    let n = library.len();
    let scale = 1.0 / n as f32;
    let mut uniform = EffectiveMask::zeros(net.arch());
    let effectives: Vec<EffectiveMask> =
        library.entries.iter().map(|(_, m)| m.to_effective()).collect();
    for e in &effectives {
        for (acc, layer) in uniform.layers.iter_mut().zip(&e.layers) {
            acc.scaled_add(scale, layer);
        }
    }
    let (logits, cache) = forward(net, &uniform, batch)?;
    let (_, grad_logits) = batch_entropy(&logits);
    let grad_eff = backward_wrt_effective_weights(net, &cache, &grad_logits)?;
    // dH/dc_t = Σ_i ⟨grad_eff_i ⊙ W_i, E^t_i⟩
    let gw: Vec<Array2<f32>> = grad_eff
        .iter()
        .zip(net.weights())
        .map(|(g, w)| g * w)
        .collect();
    let mut coefficient_grads = Vec::with_capacity(n);
    for ((id, _), e) in library.entries.iter().zip(&effectives) {
        let mut acc = 0.0f64;
        for (gwl, el) in gw.iter().zip(&e.layers) {
            acc += gwl
                .iter()
                .zip(el.iter())
                .map(|(&g, &m)| f64::from(g) * f64::from(m))
                .sum::<f64>();
        }
        coefficient_grads.push((id.clone(), acc));
    }
    let predicted = coefficient_grads
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
        .0
        .clone();
    Ok(OneShotReport {
        predicted,
        coefficient_grads,
    })
}

/// Outcome of α-based GN inference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum GnPrediction {
    /// One basis-mask row dominates; its index in the basis set.
    Mask(usize),
    /// No single row dominates; apply the α combination directly.
    Composite,
}

#[derive(Debug, Clone, Serialize)]
pub struct GnReport {
    pub predicted: GnPrediction,
    pub row_mean_abs: Vec<f64>,
}

/// Defaults for GN α-inference: nonzero λ for a sparse solution.
pub fn gn_alpha_hyper() -> AlphaHyper {
    AlphaHyper {
        lambda: 0.005,
        ..AlphaHyper::default()
    }
}

/// ImpressLearn GN inference: run α-optimization on the unidentified data,
/// then declare the dominant basis-mask if its mean |α| exceeds the
/// runner-up's by the dominance factor (default 2x), else "composite".
///
/// Task identity is never consulted: the task must carry no identifier and
/// labels enter only through the training loss.
pub fn alpha_gn_infer(
    net: &BackboneNet,
    basis: &BasisSet,
    batch_source: &Task,
    hyper: &AlphaHyper,
    seed: u64,
) -> Result<(AlphaMatrix, GnReport)> {
    if batch_source.id().is_some() {
        return Err(Error::Config(
            "GN inference requires a task without identity".into(),
        ));
    }
    let alpha = train_alpha(net, basis, batch_source, hyper, seed)?;
    let report = dominance_report(&alpha, 2.0);
    Ok((alpha, report))
}

pub fn dominance_report(alpha: &AlphaMatrix, factor: f64) -> GnReport {
    let row_mean_abs = alpha.row_mean_abs();
    let predicted = if row_mean_abs.len() == 1 {
        GnPrediction::Mask(0)
    } else {
        let mut order: Vec<usize> = (0..row_mean_abs.len()).collect();
        order.sort_by(|&a, &b| row_mean_abs[b].total_cmp(&row_mean_abs[a]));
        let (top, second) = (order[0], order[1]);
        if row_mean_abs[top] > factor * row_mean_abs[second] {
            GnPrediction::Mask(top)
        } else {
            GnPrediction::Composite
        }
    };
    GnReport {
        predicted,
        row_mean_abs,
    }
}
