//! The frozen random backbone network: construction, masked forward passes,
//! and gradients with respect to the effective (masked) weights.
//!
//! Weights are Kaiming-normal, biases are zero, and nothing here is ever
//! trained. All task adaptation happens through the mask that is applied
//! on top of these weights.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checksum::Fnv1a;
use crate::error::{Error, Result};

const BACKBONE_MAGIC: &[u8; 4] = b"IMPR";
const BACKBONE_VERSION: u32 = 1;

/// Layer-size description of a fully connected architecture.
///
/// Hidden layers use ReLU; the output layer is linear.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ArchSpec {
    pub layer_sizes: Vec<usize>,
}

impl ArchSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidArch(format!(
                "need at least 2 layer sizes, got {}",
                layer_sizes.len()
            )));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidArch("layer size of 0".into()));
        }
        Ok(ArchSpec { layer_sizes })
    }

    /// LeNet-300-100 on 28x28 inputs, 10 classes.
    pub fn lenet_300_100() -> Self {
        ArchSpec {
            layer_sizes: vec![784, 300, 100, 10],
        }
    }

    /// Number of weight layers.
    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Shape of weight layer `i` as (fan_out, fan_in).
    pub fn layer_shape(&self, i: usize) -> (usize, usize) {
        (self.layer_sizes[i + 1], self.layer_sizes[i])
    }

    pub fn num_params(&self) -> usize {
        (0..self.depth())
            .map(|i| {
                let (r, c) = self.layer_shape(i);
                r * c
            })
            .sum()
    }
}

/// Real-valued per-layer mask, shape-compatible with a backbone.
///
/// Binary masks promote to this; linear combinations of basis-masks live
/// here natively.
#[derive(Debug, Clone)]
pub struct EffectiveMask {
    pub layers: Vec<Array2<f32>>,
}

impl EffectiveMask {
    pub fn ones(arch: &ArchSpec) -> Self {
        let layers = (0..arch.depth())
            .map(|i| Array2::ones(arch.layer_shape(i)))
            .collect();
        EffectiveMask { layers }
    }

    pub fn zeros(arch: &ArchSpec) -> Self {
        let layers = (0..arch.depth())
            .map(|i| Array2::zeros(arch.layer_shape(i)))
            .collect();
        EffectiveMask { layers }
    }
}

/// Intermediates from a forward pass, consumed by the matching backward pass.
pub struct ForwardCache {
    /// Input to layer i (post-activation of layer i-1; layer 0 gets the batch).
    pub inputs: Vec<Array2<f32>>,
    /// Pre-activation of layer i.
    pub preacts: Vec<Array2<f32>>,
    /// Effective weights used on this pass, one per layer.
    pub effective: Vec<Array2<f32>>,
    pub logits: Array2<f32>,
}

/// The frozen substrate: random weights, zero biases, immutable after init.
#[derive(Debug, Clone)]
pub struct BackboneNet {
    arch: ArchSpec,
    weights: Vec<Array2<f32>>,
    biases: Vec<Array1<f32>>,
    seed: u64,
    checksum: u64,
}

impl BackboneNet {
    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn depth(&self) -> usize {
        self.arch.depth()
    }

    pub fn weights(&self) -> &[Array2<f32>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f32>] {
        &self.biases
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Checksum over (arch, seed, weights), fixed at construction.
    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    /// Recompute the checksum from current weight bytes. Equal to
    /// `checksum()` unless something mutated the weights.
    pub fn recompute_checksum(&self) -> u64 {
        compute_checksum(&self.arch, self.seed, &self.weights)
    }
}

fn compute_checksum(arch: &ArchSpec, seed: u64, weights: &[Array2<f32>]) -> u64 {
    let mut h = Fnv1a::new();
    for &s in &arch.layer_sizes {
        h.update_u64(s as u64);
    }
    h.update_u64(seed);
    for w in weights {
        h.update_f32_slice(w.as_slice().unwrap());
    }
    h.finish()
}

/// Builds the frozen backbone: Kaiming-normal weights (std sqrt(2/fan_in)),
/// zero biases, deterministic in `(arch, seed)`.
pub fn init_backbone(arch: &ArchSpec, seed: u64) -> Result<BackboneNet> {
    let arch = ArchSpec::new(arch.layer_sizes.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(arch.depth());
    let mut biases = Vec::with_capacity(arch.depth());
    for i in 0..arch.depth() {
        let (fan_out, fan_in) = arch.layer_shape(i);
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        let data: Vec<f32> = (0..fan_out * fan_in)
            .map(|_| dist.sample(&mut rng) as f32)
            .collect();
        weights.push(Array2::from_shape_vec((fan_out, fan_in), data).unwrap());
        biases.push(Array1::zeros(fan_out));
    }
    let checksum = compute_checksum(&arch, seed, &weights);
    Ok(BackboneNet {
        arch,
        weights,
        biases,
        seed,
        checksum,
    })
}

fn check_mask_shape(net: &BackboneNet, mask: &EffectiveMask) -> Result<()> {
    if mask.layers.len() != net.depth() {
        return Err(Error::Dimension(format!(
            "mask has {} layers, backbone has {}",
            mask.layers.len(),
            net.depth()
        )));
    }
    for (i, m) in mask.layers.iter().enumerate() {
        if m.dim() != net.weights[i].dim() {
            return Err(Error::Dimension(format!(
                "mask layer {} is {:?}, backbone layer is {:?}",
                i,
                m.dim(),
                net.weights[i].dim()
            )));
        }
    }
    Ok(())
}

/// Masked forward pass: layer i computes `relu((mask_i ⊙ W_i) x + b_i)`,
/// with no activation on the output layer.
pub fn forward(
    net: &BackboneNet,
    mask: &EffectiveMask,
    batch: &Array2<f32>,
) -> Result<(Array2<f32>, ForwardCache)> {
    check_mask_shape(net, mask)?;
    if batch.ncols() != net.arch.input_dim() {
        return Err(Error::Dimension(format!(
            "batch has {} features, backbone expects {}",
            batch.ncols(),
            net.arch.input_dim()
        )));
    }
    let d = net.depth();
    let mut inputs = Vec::with_capacity(d);
    let mut preacts = Vec::with_capacity(d);
    let mut effective = Vec::with_capacity(d);
    let mut x = batch.clone();
    for i in 0..d {
        let eff = &mask.layers[i] * &net.weights[i];
        let mut z = x.dot(&eff.t());
        z += &net.biases[i];
        inputs.push(x);
        if i + 1 < d {
            x = z.mapv(|v| v.max(0.0));
        } else {
            x = z.clone();
        }
        preacts.push(z);
        effective.push(eff);
    }
    let logits = x;
    let cache = ForwardCache {
        inputs,
        preacts,
        effective,
        logits: logits.clone(),
    };
    Ok((logits, cache))
}

/// Mean cross-entropy over the batch, with the gradient w.r.t. logits.
///
/// Stabilized by max-subtraction; `grad = (softmax - onehot) / batch`.
pub fn cross_entropy_loss(logits: &Array2<f32>, labels: &[usize]) -> Result<(f32, Array2<f32>)> {
    let (n, l) = logits.dim();
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{} logit rows vs {} labels",
            n,
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= l) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: l,
        });
    }
    let mut grad = logits.clone();
    let mut loss = 0.0f64;
    for (row, &y) in grad.axis_iter_mut(Axis(0)).zip(labels) {
        let mut row = row;
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        loss += -(f64::from(row[y]) / f64::from(sum)).ln();
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
        row[y] -= 1.0;
    }
    grad /= n as f32;
    Ok(((loss / n as f64) as f32, grad))
}

/// Backprop to `∂L/∂(mask_i ⊙ W_i)` for every layer, treating the effective
/// weights as free variables. ReLU gradient gates on the cached pre-activations.
pub fn backward_wrt_effective_weights(
    net: &BackboneNet,
    cache: &ForwardCache,
    grad_logits: &Array2<f32>,
) -> Result<Vec<Array2<f32>>> {
    let d = net.depth();
    if cache.inputs.len() != d || cache.preacts.len() != d {
        return Err(Error::Dimension("cache depth mismatch".into()));
    }
    if grad_logits.dim() != cache.logits.dim() {
        return Err(Error::Dimension("grad_logits shape mismatch with cache".into()));
    }
    let mut grads = vec![Array2::zeros((0, 0)); d];
    let mut grad_z = grad_logits.clone();
    for i in (0..d).rev() {
        grads[i] = grad_z.t().dot(&cache.inputs[i]);
        if i > 0 {
            let mut grad_x = grad_z.dot(&cache.effective[i]);
            // relu gate from layer i-1's pre-activation
            grad_x.zip_mut_with(&cache.preacts[i - 1], |g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
            grad_z = grad_x;
        }
    }
    Ok(grads)
}

/// Writes the backbone in the `IMPR` binary format with a trailing checksum.
pub fn save_backbone(net: &BackboneNet, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(BACKBONE_MAGIC);
    buf.write_u32::<LittleEndian>(BACKBONE_VERSION)?;
    buf.write_u32::<LittleEndian>(net.arch.layer_sizes.len() as u32)?;
    for &s in &net.arch.layer_sizes {
        buf.write_u32::<LittleEndian>(s as u32)?;
    }
    buf.write_u64::<LittleEndian>(net.seed)?;
    for w in &net.weights {
        for &v in w.as_slice().unwrap() {
            buf.write_f32::<LittleEndian>(v)?;
        }
    }
    let check = crate::checksum::fnv1a(&buf);
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&buf)?;
    f.write_u64::<LittleEndian>(check)?;
    Ok(())
}

pub fn load_backbone(path: &Path) -> Result<BackboneNet> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != BACKBONE_MAGIC {
        return Err(Error::format(path, "missing IMPR magic"));
    }
    let payload_len = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[payload_len..].try_into().unwrap());
    if crate::checksum::fnv1a(&bytes[..payload_len]) != stored {
        return Err(Error::format(path, "checksum mismatch"));
    }
    let mut r = &bytes[4..payload_len];
    let version = r.read_u32::<LittleEndian>()?;
    if version != BACKBONE_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let n_sizes = r.read_u32::<LittleEndian>()? as usize;
    let mut layer_sizes = Vec::with_capacity(n_sizes);
    for _ in 0..n_sizes {
        layer_sizes.push(r.read_u32::<LittleEndian>()? as usize);
    }
    let arch = ArchSpec::new(layer_sizes)
        .map_err(|e| Error::format(path, format!("bad arch: {e}")))?;
    let seed = r.read_u64::<LittleEndian>()?;
    let mut weights = Vec::with_capacity(arch.depth());
    for i in 0..arch.depth() {
        let (rows, cols) = arch.layer_shape(i);
        let mut data = vec![0f32; rows * cols];
        r.read_f32_into::<LittleEndian>(&mut data)?;
        weights.push(Array2::from_shape_vec((rows, cols), data).unwrap());
    }
    if !r.is_empty() {
        return Err(Error::format(path, "trailing bytes in weight payload"));
    }
    let biases = (0..arch.depth())
        .map(|i| Array1::zeros(arch.layer_shape(i).0))
        .collect();
    let checksum = compute_checksum(&arch, seed, &weights);
    Ok(BackboneNet {
        arch,
        weights,
        biases,
        seed,
        checksum,
    })
}
