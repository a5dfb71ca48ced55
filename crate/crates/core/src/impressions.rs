//! Basis-mask collections and their layerwise linear combination.
//!
//! A `BinaryMask` is one impression: a bit per backbone weight at a fixed
//! per-layer ones-count. A `BasisSet` is an ordered collection of them bound
//! to one backbone; `combine` forms the real-valued effective mask
//! `Σ_t α[t,i] · M^t_i` per layer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneNet, EffectiveMask};
use crate::checksum::Fnv1a;
use crate::edgepopup::{train_supermask, SupermaskHyper};
use crate::error::{Error, Result};
use crate::tasks::Task;

const MASK_MAGIC: &[u8; 4] = b"IMSK";
const MASK_VERSION: u32 = 1;

/// Where a mask came from; determines how it is labeled in manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    Heterogeneous { task_id: String, seed: u64 },
    Homogeneous { task_id: String, seed: u64 },
    Random { seed: u64 },
}

/// One bit-packed mask layer. Bit `r*cols + c` (LSB-first within each word)
/// holds the entry for weight (r, c).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskLayer {
    pub rows: usize,
    pub cols: usize,
    words: Vec<u64>,
}

impl MaskLayer {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let n = rows * cols;
        MaskLayer {
            rows,
            cols,
            words: vec![0; n.div_ceil(64)],
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn get(&self, flat: usize) -> bool {
        self.words[flat >> 6] >> (flat & 63) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, flat: usize) {
        self.words[flat >> 6] |= 1 << (flat & 63);
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Iterates flat indices of set bits in ascending order.
    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    None
                } else {
                    let b = w.trailing_zeros() as usize;
                    w &= w - 1;
                    Some(wi * 64 + b)
                }
            })
        })
    }

    fn intersection_count(&self, other: &MaskLayer) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    fn union_count(&self, other: &MaskLayer) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a | b).count_ones() as usize)
            .sum()
    }

    /// Packed bytes, 8 entries per byte, zero-padded final byte.
    pub fn packed_bytes(&self) -> Vec<u8> {
        let n_bytes = self.len().div_ceil(8);
        let mut out = Vec::with_capacity(n_bytes);
        for w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out.truncate(n_bytes);
        out
    }

    pub fn from_packed_bytes(rows: usize, cols: usize, bytes: &[u8]) -> Result<MaskLayer> {
        let n = rows * cols;
        if bytes.len() != n.div_ceil(8) {
            return Err(Error::Dimension(format!(
                "packed layer payload is {} bytes, expected {}",
                bytes.len(),
                n.div_ceil(8)
            )));
        }
        let mut layer = MaskLayer::zeros(rows, cols);
        for (wi, chunk) in bytes.chunks(8).enumerate() {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            layer.words[wi] = u64::from_le_bytes(buf);
        }
        // padding bits past n must be zero
        if n % 64 != 0 {
            let last = layer.words.len() - 1;
            if layer.words[last] >> (n % 64) != 0 {
                return Err(Error::Dimension("nonzero padding bits in mask".into()));
            }
        }
        Ok(layer)
    }
}

/// A binary supermask at fixed sparsity, one bit array per weight layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub layers: Vec<MaskLayer>,
    pub sparsity: f32,
    pub provenance: Provenance,
}

impl BinaryMask {
    /// Promote to a real-valued mask of 0.0/1.0 entries.
    pub fn to_effective(&self) -> EffectiveMask {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let mut m = Array2::zeros((l.rows, l.cols));
                {
                    let flat = m.as_slice_mut().unwrap();
                    for i in l.iter_ones() {
                        flat[i] = 1.0;
                    }
                }
                m
            })
            .collect();
        EffectiveMask { layers }
    }

    /// Content checksum over sparsity, shapes, and packed bits.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.update(&self.sparsity.to_le_bytes());
        for l in &self.layers {
            h.update_u64(l.rows as u64);
            h.update_u64(l.cols as u64);
            h.update(&l.packed_bytes());
        }
        h.finish()
    }
}

/// Basis collection modes studied in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisMode {
    Heterogeneous,
    Homogeneous,
    Random,
}

/// Ordered, immutable collection of basis-masks bound to one backbone.
/// α row indices refer to positions in `masks`.
pub struct BasisSet {
    pub masks: Vec<BinaryMask>,
    pub backbone_checksum: u64,
    pub mode: BasisMode,
    pub sparsity: f32,
}

impl BasisSet {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn bind_check(&self, net: &BackboneNet) -> Result<()> {
        if self.backbone_checksum != net.checksum() {
            return Err(Error::BackboneMismatch {
                expected: self.backbone_checksum,
                actual: net.checksum(),
            });
        }
        Ok(())
    }

    /// Checksum over all member masks in order.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.update_u64(self.backbone_checksum);
        for m in &self.masks {
            h.update_u64(m.checksum());
        }
        h.finish()
    }
}

/// One trained mask per basis task, all from one seed.
pub fn generate_heterogeneous_basis(
    net: &BackboneNet,
    basis_tasks: &[Task],
    hyper: &SupermaskHyper,
    seed: u64,
) -> Result<BasisSet> {
    if basis_tasks.is_empty() {
        return Err(Error::Config("heterogeneous basis needs >= 1 task".into()));
    }
    let mut masks = Vec::with_capacity(basis_tasks.len());
    for task in basis_tasks {
        let mut mask = train_supermask(net, task, hyper, seed)?;
        mask.provenance = Provenance::Heterogeneous {
            task_id: task.id().unwrap_or("unnamed").to_string(),
            seed,
        };
        masks.push(mask);
    }
    Ok(BasisSet {
        masks,
        backbone_checksum: net.checksum(),
        mode: BasisMode::Heterogeneous,
        sparsity: hyper.sparsity,
    })
}

/// `n` masks trained on one task under seeds `base_seed..base_seed+n`.
pub fn generate_homogeneous_basis(
    net: &BackboneNet,
    task: &Task,
    n: usize,
    hyper: &SupermaskHyper,
    base_seed: u64,
) -> Result<BasisSet> {
    if n == 0 {
        return Err(Error::Config("homogeneous basis needs n >= 1".into()));
    }
    let mut masks = Vec::with_capacity(n);
    for k in 0..n as u64 {
        let seed = base_seed + k;
        let mut mask = train_supermask(net, task, hyper, seed)?;
        mask.provenance = Provenance::Homogeneous {
            task_id: task.id().unwrap_or("unnamed").to_string(),
            seed,
        };
        masks.push(mask);
    }
    Ok(BasisSet {
        masks,
        backbone_checksum: net.checksum(),
        mode: BasisMode::Homogeneous,
        sparsity: hyper.sparsity,
    })
}

/// `n` unoptimized masks with exactly `round((1-s)·n_i)` ones per layer,
/// placed uniformly at random without replacement.
pub fn generate_random_basis(
    net: &BackboneNet,
    sparsity: f32,
    n: usize,
    seed: u64,
) -> Result<BasisSet> {
    if n == 0 {
        return Err(Error::Config("random basis needs n >= 1".into()));
    }
    let arch = net.arch();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = Vec::with_capacity(n);
    for k in 0..n as u64 {
        let mut layers = Vec::with_capacity(arch.depth());
        for i in 0..arch.depth() {
            let (rows, cols) = arch.layer_shape(i);
            let total = rows * cols;
            let keep = ((1.0 - sparsity as f64) * total as f64).round() as usize;
            if keep == 0 {
                return Err(Error::LayerFullyMasked { layer: i, sparsity });
            }
            let mut layer = MaskLayer::zeros(rows, cols);
            for idx in rand::seq::index::sample(&mut rng, total, keep) {
                layer.set(idx);
            }
            layers.push(layer);
        }
        masks.push(BinaryMask {
            layers,
            sparsity,
            provenance: Provenance::Random { seed: seed + k },
        });
    }
    Ok(BasisSet {
        masks,
        backbone_checksum: net.checksum(),
        mode: BasisMode::Random,
        sparsity,
    })
}

/// Layerwise linear combination: layer i of the result is `Σ_t α[t,i]·M^t_i`.
/// Refuses a backbone whose checksum differs from the basis binding.
pub fn combine(
    basis: &BasisSet,
    alpha: &crate::alphatrain::AlphaMatrix,
    net: &BackboneNet,
) -> Result<EffectiveMask> {
    basis.bind_check(net)?;
    let d = net.depth();
    if alpha.values.dim() != (basis.len(), d) {
        return Err(Error::Dimension(format!(
            "alpha is {:?}, expected ({}, {})",
            alpha.values.dim(),
            basis.len(),
            d
        )));
    }
    let mut out = EffectiveMask::zeros(net.arch());
    for (t, mask) in basis.masks.iter().enumerate() {
        for (i, layer) in mask.layers.iter().enumerate() {
            let a = alpha.values[[t, i]];
            if a == 0.0 {
                continue;
            }
            let flat = out.layers[i].as_slice_mut().unwrap();
            for idx in layer.iter_ones() {
                flat[idx] += a;
            }
        }
    }
    Ok(out)
}

/// Per-layer overlap statistics between two masks.
#[derive(Debug, Clone, Copy)]
pub struct LayerOverlap {
    pub jaccard: f64,
    /// `|ones(a) ∩ ones(b)| / ones(a)`.
    pub shared_ones_fraction: f64,
}

pub fn overlap_stats(a: &BinaryMask, b: &BinaryMask) -> Result<Vec<LayerOverlap>> {
    if a.layers.len() != b.layers.len() {
        return Err(Error::Dimension("mask depth mismatch".into()));
    }
    a.layers
        .iter()
        .zip(&b.layers)
        .map(|(la, lb)| {
            if (la.rows, la.cols) != (lb.rows, lb.cols) {
                return Err(Error::Dimension("mask layer shape mismatch".into()));
            }
            let inter = la.intersection_count(lb) as f64;
            let union = la.union_count(lb) as f64;
            let k = la.count_ones() as f64;
            Ok(LayerOverlap {
                jaccard: if union == 0.0 { 1.0 } else { inter / union },
                shared_ones_fraction: if k == 0.0 { 0.0 } else { inter / k },
            })
        })
        .collect()
}

/// Writes a mask in the `IMSK` format, bound to its backbone by checksum.
pub fn save_mask(mask: &BinaryMask, backbone_checksum: u64, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(MASK_MAGIC)?;
    f.write_u32::<LittleEndian>(MASK_VERSION)?;
    f.write_u64::<LittleEndian>(backbone_checksum)?;
    f.write_f32::<LittleEndian>(mask.sparsity)?;
    f.write_u32::<LittleEndian>(mask.layers.len() as u32)?;
    for l in &mask.layers {
        f.write_u32::<LittleEndian>(l.rows as u32)?;
        f.write_u32::<LittleEndian>(l.cols as u32)?;
        f.write_all(&l.packed_bytes())?;
    }
    Ok(())
}

/// Loads an `IMSK` file. The file does not carry provenance; the caller
/// (normally a basis manifest) supplies it. Returns the stored backbone
/// checksum alongside the mask.
pub fn load_mask(path: &Path, provenance: Provenance) -> Result<(BinaryMask, u64)> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 4 || &bytes[..4] != MASK_MAGIC {
        return Err(Error::format(path, "missing IMSK magic"));
    }
    let mut r = &bytes[4..];
    let version = r.read_u32::<LittleEndian>()?;
    if version != MASK_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let backbone_checksum = r.read_u64::<LittleEndian>()?;
    let sparsity = r.read_f32::<LittleEndian>()?;
    let d = r.read_u32::<LittleEndian>()? as usize;
    let mut layers = Vec::with_capacity(d);
    for _ in 0..d {
        let rows = r.read_u32::<LittleEndian>()? as usize;
        let cols = r.read_u32::<LittleEndian>()? as usize;
        let n_bytes = (rows * cols).div_ceil(8);
        if r.len() < n_bytes {
            return Err(Error::format(path, "truncated mask payload"));
        }
        let layer = MaskLayer::from_packed_bytes(rows, cols, &r[..n_bytes])
            .map_err(|e| Error::format(path, e.to_string()))?;
        r = &r[n_bytes..];
        layers.push(layer);
    }
    if !r.is_empty() {
        return Err(Error::format(path, "trailing bytes after mask payload"));
    }
    Ok((
        BinaryMask {
            layers,
            sparsity,
            provenance,
        },
        backbone_checksum,
    ))
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    mode: BasisMode,
    sparsity: f32,
    backbone_checksum: String,
    masks: Vec<ManifestEntry>,
}

/// Writes a basis set as `manifest.json` plus one `IMSK` file per mask.
pub fn save_basis(basis: &BasisSet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(basis.len());
    for (i, mask) in basis.masks.iter().enumerate() {
        let file = format!("mask_{i:04}.imsk");
        save_mask(mask, basis.backbone_checksum, &dir.join(&file))?;
        entries.push(ManifestEntry {
            file,
            provenance: mask.provenance.clone(),
        });
    }
    let manifest = Manifest {
        mode: basis.mode,
        sparsity: basis.sparsity,
        backbone_checksum: format!("{:016x}", basis.backbone_checksum),
        masks: entries,
    };
    let f = BufWriter::new(File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(f, &manifest)?;
    Ok(())
}

/// Loads a basis directory written by `save_basis`.
pub fn load_basis(dir: &Path) -> Result<BasisSet> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_reader(BufReader::new(File::open(&manifest_path)?))?;
    let backbone_checksum = u64::from_str_radix(&manifest.backbone_checksum, 16)
        .map_err(|_| Error::format(&manifest_path, "bad backbone checksum"))?;
    let mut masks = Vec::with_capacity(manifest.masks.len());
    for entry in manifest.masks {
        let (mask, stored) = load_mask(&dir.join(&entry.file), entry.provenance)?;
        if stored != backbone_checksum {
            return Err(Error::BackboneMismatch {
                expected: backbone_checksum,
                actual: stored,
            });
        }
        masks.push(mask);
    }
    Ok(BasisSet {
        masks,
        backbone_checksum,
        mode: manifest.mode,
        sparsity: manifest.sparsity,
    })
}

/// FNV checksum of the manifest file's bytes; binds an α file to its basis.
pub fn manifest_checksum(dir: &Path) -> Result<u64> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(dir.join("manifest.json"))?).read_to_end(&mut bytes)?;
    Ok(crate::checksum::fnv1a(&bytes))
}
