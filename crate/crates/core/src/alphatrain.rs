//! Learning the per-task coefficient matrix α: the objective combines the
//! classification loss of the mask combination with a per-layer penalty
//! pulling each layer's absolute coefficient mass toward 1.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    backward_wrt_effective_weights, cross_entropy_loss, forward, BackboneNet, ForwardCache,
};
use crate::edgepopup::train_gain;
use crate::error::{Error, Result};
use crate::impressions::{combine, BasisSet};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::tasks::{Split, Task};

const ALPHA_MAGIC: &[u8; 4] = b"IMAL";
const ALPHA_VERSION: u32 = 1;

/// The only per-task learned state: one coefficient per basis-mask per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaMatrix {
    /// Shape (|ℳ|, d).
    pub values: Array2<f32>,
    pub task_id: String,
}

impl AlphaMatrix {
    pub fn num_masks(&self) -> usize {
        self.values.nrows()
    }

    pub fn depth(&self) -> usize {
        self.values.ncols()
    }

    /// One-hot on mask `j`: recovers basis mask `j` exactly under `combine`.
    pub fn one_hot(m: usize, d: usize, j: usize) -> AlphaMatrix {
        let mut values = Array2::zeros((m, d));
        for i in 0..d {
            values[[j, i]] = 1.0;
        }
        AlphaMatrix {
            values,
            task_id: String::new(),
        }
    }

    /// Mean |α| per basis-mask row, the GN dominance statistic.
    pub fn row_mean_abs(&self) -> Vec<f64> {
        self.values
            .outer_iter()
            .map(|row| row.iter().map(|&v| f64::from(v.abs())).sum::<f64>() / row.len() as f64)
            .collect()
    }

    pub fn checksum(&self) -> u64 {
        let mut h = crate::checksum::Fnv1a::new();
        h.update(self.task_id.as_bytes());
        h.update_f32_slice(self.values.as_slice().unwrap());
        h.finish()
    }
}

/// Hyperparameters for α optimization. MNIST-family defaults from the
/// experiment sweep: RMSprop, lr 0.002, λ=0, batch 128, 5 epochs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlphaHyper {
    pub optimizer: OptimizerConfig,
    pub lambda: f32,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub max_train_items: Option<usize>,
}

impl Default for AlphaHyper {
    fn default() -> Self {
        AlphaHyper {
            optimizer: OptimizerConfig::rmsprop(0.002),
            lambda: 0.0,
            epochs: 5,
            batch_size: 128,
            max_train_items: None,
        }
    }
}

/// Uniform prior: every entry is `1/m`, so each layer's coefficients sum to 1.
pub fn init_alpha(m: usize, d: usize) -> AlphaMatrix {
    assert!(m >= 1 && d >= 1);
    AlphaMatrix {
        values: Array2::from_elem((m, d), 1.0 / m as f32),
        task_id: String::new(),
    }
}

/// Per-layer penalty `λ Σ_i (Σ_t |α[t,i]| − 1)²`.
pub fn regularizer(alpha: &AlphaMatrix, lambda: f32) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let mut total = 0.0f64;
    for col in alpha.values.columns() {
        let sum: f64 = col.iter().map(|&v| f64::from(v.abs())).sum();
        total += (sum - 1.0) * (sum - 1.0);
    }
    f64::from(lambda) * total
}

/// Cache linking an objective evaluation to its gradient computation.
pub struct AlphaCache {
    forward: ForwardCache,
    grad_logits: Array2<f32>,
    lambda: f32,
}

/// Evaluates `J = L(y, f(x, combine(basis, α) ⊙ W)) + regularizer(α, λ)`.
pub fn alpha_objective(
    net: &BackboneNet,
    basis: &BasisSet,
    alpha: &AlphaMatrix,
    batch: &Array2<f32>,
    labels: &[usize],
    lambda: f32,
) -> Result<(f64, AlphaCache)> {
    let effective = combine(basis, alpha, net)?;
    let (logits, cache) = forward(net, &effective, batch)?;
    let (loss, grad_logits) = cross_entropy_loss(&logits, labels)?;
    let j = f64::from(loss) + regularizer(alpha, lambda);
    Ok((
        j,
        AlphaCache {
            forward: cache,
            grad_logits,
            lambda,
        },
    ))
}

/// Gradient of the objective w.r.t. α. Entry (t,i) is the inner product of
/// `∂L/∂(effective weights of layer i)` with `M^t_i ⊙ W_i`, plus the penalty
/// subgradient `2λ(Σ_u|α[u,i]|−1)·sign(α[t,i])` with `sign(0) = 0`.
pub fn alpha_gradient(
    net: &BackboneNet,
    basis: &BasisSet,
    alpha: &AlphaMatrix,
    cache: &AlphaCache,
) -> Result<Array2<f32>> {
    let grad_eff = backward_wrt_effective_weights(net, &cache.forward, &cache.grad_logits)?;
    let mut grad = mask_inner_products(net, basis, &grad_eff)?;
    if cache.lambda > 0.0 {
        let lambda = f64::from(cache.lambda);
        for (i, col) in alpha.values.columns().into_iter().enumerate() {
            let sum: f64 = col.iter().map(|&v| f64::from(v.abs())).sum();
            let scale = 2.0 * lambda * (sum - 1.0);
            for (t, &v) in col.iter().enumerate() {
                grad[[t, i]] += (scale * f64::from(v.signum_or_zero())) as f32;
            }
        }
    }
    Ok(grad)
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f32;
}

impl SignumOrZero for f32 {
    fn signum_or_zero(self) -> f32 {
        if self == 0.0 {
            0.0
        } else {
            self.signum()
        }
    }
}

/// `out[t,i] = ⟨grad_eff_i ⊙ W_i, M^t_i⟩`, shared by α training and the
/// one-shot entropy inference.
pub(crate) fn mask_inner_products(
    net: &BackboneNet,
    basis: &BasisSet,
    grad_eff: &[Array2<f32>],
) -> Result<Array2<f32>> {
    let d = net.depth();
    if grad_eff.len() != d {
        return Err(Error::Dimension("gradient depth mismatch".into()));
    }
    let mut out = Array2::zeros((basis.len(), d));
    for i in 0..d {
        let gw = &grad_eff[i] * &net.weights()[i];
        let flat = gw.as_slice().unwrap();
        for (t, mask) in basis.masks.iter().enumerate() {
            let mut acc = 0.0f64;
            for idx in mask.layers[i].iter_ones() {
                acc += f64::from(flat[idx]);
            }
            out[[t, i]] = acc as f32;
        }
    }
    Ok(out)
}

/// Runs minibatch descent on J starting from the uniform init. Backbone and
/// basis are read-only; only the returned α is learned state.
pub fn train_alpha(
    net: &BackboneNet,
    basis: &BasisSet,
    task: &Task,
    hyper: &AlphaHyper,
    seed: u64,
) -> Result<AlphaMatrix> {
    basis.bind_check(net)?;
    let mut alpha = init_alpha(basis.len(), net.depth());
    alpha.task_id = task.id().unwrap_or("unidentified").to_string();
    let mut opt = Optimizer::new(hyper.optimizer, &[alpha.values.dim()]);
    // Optimize in the same gain-compensated regime the basis masks were
    // trained in: the loss sees g·α, so an α row summing to 1 carries one
    // well-scaled mask's worth of signal. Evaluation is unaffected (argmax
    // is invariant to per-layer positive scaling).
    let gain = train_gain(basis.sparsity);
    for epoch in 0..hyper.epochs as u64 {
        let mut seen = 0usize;
        for batch in task.batches(Split::Train, hyper.batch_size, seed, epoch)? {
            if let Some(limit) = hyper.max_train_items {
                if seen >= limit {
                    break;
                }
                seen += batch.labels.len();
            }
            let mut scaled = alpha.clone();
            scaled.values *= gain;
            let (_, cache) = alpha_objective(net, basis, &scaled, &batch.inputs, &batch.labels, 0.0)?;
            let mut grad = alpha_gradient(net, basis, &scaled, &cache)?;
            grad *= gain;
            // The sum-to-one penalty acts on the stored α, not the scaled
            // copy, so the uniform init stays penalty-free.
            if hyper.lambda > 0.0 {
                let lambda = f64::from(hyper.lambda);
                for (i, col) in alpha.values.columns().into_iter().enumerate() {
                    let sum: f64 = col.iter().map(|&v| f64::from(v.abs())).sum();
                    let scale = 2.0 * lambda * (sum - 1.0);
                    for (t, &v) in col.iter().enumerate() {
                        let sgn = if v == 0.0 { 0.0 } else { v.signum() };
                        grad[[t, i]] += (scale * f64::from(sgn)) as f32;
                    }
                }
            }
            let mut params = [std::mem::take(&mut alpha.values)];
            opt.step(&mut params, &[grad]);
            alpha.values = std::mem::take(&mut params[0]);
        }
    }
    Ok(alpha)
}

/// Writes an α matrix in the `IMAL` format, bound to a basis-set manifest.
pub fn save_alpha(alpha: &AlphaMatrix, manifest_checksum: u64, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(ALPHA_MAGIC)?;
    f.write_u32::<LittleEndian>(ALPHA_VERSION)?;
    f.write_u64::<LittleEndian>(manifest_checksum)?;
    f.write_u32::<LittleEndian>(alpha.task_id.len() as u32)?;
    f.write_all(alpha.task_id.as_bytes())?;
    f.write_u32::<LittleEndian>(alpha.num_masks() as u32)?;
    f.write_u32::<LittleEndian>(alpha.depth() as u32)?;
    for &v in alpha.values.as_slice().unwrap() {
        f.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

/// Loads an `IMAL` file, returning the α and its stored manifest checksum.
pub fn load_alpha(path: &Path) -> Result<(AlphaMatrix, u64)> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 4 || &bytes[..4] != ALPHA_MAGIC {
        return Err(Error::format(path, "missing IMAL magic"));
    }
    let mut r = &bytes[4..];
    let version = r.read_u32::<LittleEndian>()?;
    if version != ALPHA_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let manifest_checksum = r.read_u64::<LittleEndian>()?;
    let id_len = r.read_u32::<LittleEndian>()? as usize;
    if r.len() < id_len {
        return Err(Error::format(path, "truncated task id"));
    }
    let task_id = String::from_utf8(r[..id_len].to_vec())
        .map_err(|_| Error::format(path, "task id is not UTF-8"))?;
    r = &r[id_len..];
    let m = r.read_u32::<LittleEndian>()? as usize;
    let d = r.read_u32::<LittleEndian>()? as usize;
    let mut data = vec![0f32; m * d];
    r.read_f32_into::<LittleEndian>(&mut data)?;
    if !r.is_empty() {
        return Err(Error::format(path, "trailing bytes after alpha payload"));
    }
    Ok((
        AlphaMatrix {
            values: Array2::from_shape_vec((m, d), data).unwrap(),
            task_id,
        },
        manifest_checksum,
    ))
}
