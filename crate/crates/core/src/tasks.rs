//! MNIST-format data loading and task construction: pixel permutations,
//! rotations, and class splits, each deterministic in its parameters.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checksum::Fnv1a;
use crate::error::{Error, Result};

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw dataset as loaded from IDX files: flat u8 pixels plus labels.
#[derive(Clone)]
pub struct MnistData {
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub count: usize,
}

impl MnistData {
    pub fn image(&self, idx: usize) -> &[u8] {
        &self.images[idx * IMAGE_PIXELS..(idx + 1) * IMAGE_PIXELS]
    }
}

fn read_be_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::DataLoad {
        path: path.to_path_buf(),
        reason: format!("truncated header: {e}"),
    })?;
    Ok(u32::from_be_bytes(buf))
}

/// Loads an MNIST image/label file pair in the big-endian IDX format.
pub fn load_idx_dataset(image_path: &Path, label_path: &Path) -> Result<MnistData> {
    let mut ir = BufReader::new(File::open(image_path).map_err(|e| Error::DataLoad {
        path: image_path.to_path_buf(),
        reason: e.to_string(),
    })?);
    let magic = read_be_u32(&mut ir, image_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::DataLoad {
            path: image_path.to_path_buf(),
            reason: format!("bad image magic {magic:#010x}"),
        });
    }
    let count = read_be_u32(&mut ir, image_path)? as usize;
    let rows = read_be_u32(&mut ir, image_path)? as usize;
    let cols = read_be_u32(&mut ir, image_path)? as usize;
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(Error::DataLoad {
            path: image_path.to_path_buf(),
            reason: format!("expected 28x28 images, got {rows}x{cols}"),
        });
    }
    let mut images = vec![0u8; count * IMAGE_PIXELS];
    ir.read_exact(&mut images).map_err(|e| Error::DataLoad {
        path: image_path.to_path_buf(),
        reason: format!("truncated image payload: {e}"),
    })?;

    let mut lr = BufReader::new(File::open(label_path).map_err(|e| Error::DataLoad {
        path: label_path.to_path_buf(),
        reason: e.to_string(),
    })?);
    let magic = read_be_u32(&mut lr, label_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::DataLoad {
            path: label_path.to_path_buf(),
            reason: format!("bad label magic {magic:#010x}"),
        });
    }
    let label_count = read_be_u32(&mut lr, label_path)? as usize;
    if label_count != count {
        return Err(Error::DataLoad {
            path: label_path.to_path_buf(),
            reason: format!("{label_count} labels vs {count} images"),
        });
    }
    let mut labels = vec![0u8; count];
    lr.read_exact(&mut labels).map_err(|e| Error::DataLoad {
        path: label_path.to_path_buf(),
        reason: format!("truncated label payload: {e}"),
    })?;
    Ok(MnistData {
        images,
        labels,
        count,
    })
}

/// Loads the standard train files from a directory
/// (`train-images-idx3-ubyte`, `train-labels-idx1-ubyte`).
pub fn load_mnist_train(dir: &Path) -> Result<MnistData> {
    load_idx_dataset(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )
}

/// Data directory: `IMPRESS_DATA_DIR` if set, else `./data/mnist`.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os("IMPRESS_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}

/// One bilinear sample: four flat source indices with weights.
/// Indices of u32::MAX mean "outside the image" and contribute zero.
type BilinearTap = [(u32, f32); 4];

/// Pixel-space transform defining a task.
#[derive(Clone)]
pub enum Transform {
    /// Fixed pixel permutation; `out[i] = in[perm[i]]`.
    Permutation { seed: u64, perm: Vec<u16> },
    /// Rotation about the image center, bilinear, zero fill.
    Rotation {
        angle_degrees: f32,
        table: Vec<BilinearTap>,
    },
    /// Restriction to a class subset with labels remapped to `0..l`.
    Split { classes: Vec<u8> },
}

/// A classification task over the base dataset. The optional `id` is absent
/// on GN inference paths, where task identity must not be consulted.
#[derive(Clone)]
pub struct TaskSpec {
    pub transform: Transform,
    pub label_count: usize,
    pub id: Option<String>,
}

impl TaskSpec {
    /// Same task with the identity stripped, for GN-regime inference.
    pub fn without_identity(&self) -> TaskSpec {
        TaskSpec {
            id: None,
            ..self.clone()
        }
    }

    /// Applies the input transform to an already-normalized image. Split
    /// tasks leave pixels untouched.
    pub fn apply(&self, image: &[f32]) -> Vec<f32> {
        assert_eq!(image.len(), IMAGE_PIXELS);
        match &self.transform {
            Transform::Permutation { perm, .. } => {
                perm.iter().map(|&p| image[p as usize]).collect()
            }
            Transform::Rotation { table, .. } => table
                .iter()
                .map(|tap| {
                    tap.iter()
                        .filter(|&&(src, _)| src != u32::MAX)
                        .map(|&(src, w)| w * image[src as usize])
                        .sum()
                })
                .collect(),
            Transform::Split { .. } => image.to_vec(),
        }
    }
}

/// Permuted-MNIST task. Seed 0 is reserved for the identity permutation
/// (task 0 = plain MNIST).
pub fn make_permuted_task(perm_seed: u64) -> TaskSpec {
    let mut perm: Vec<u16> = (0..IMAGE_PIXELS as u16).collect();
    if perm_seed != 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        perm.shuffle(&mut rng);
    }
    TaskSpec {
        transform: Transform::Permutation {
            seed: perm_seed,
            perm,
        },
        label_count: 10,
        id: Some(format!("perm-{perm_seed}")),
    }
}

/// Rotated-MNIST task at the given angle in `[0, 360)`.
pub fn make_rotated_task(angle_degrees: f32) -> Result<TaskSpec> {
    if !(0.0..360.0).contains(&angle_degrees) {
        return Err(Error::Config(format!(
            "rotation angle {angle_degrees} outside [0, 360)"
        )));
    }
    let theta = (angle_degrees as f64).to_radians();
    let (sin, cos) = theta.sin_cos();
    let center = (IMAGE_SIDE as f64 - 1.0) / 2.0;
    let mut table = Vec::with_capacity(IMAGE_PIXELS);
    for r_out in 0..IMAGE_SIDE {
        for c_out in 0..IMAGE_SIDE {
            let x = c_out as f64 - center;
            let y = r_out as f64 - center;
            // output(p) samples input at the inverse rotation of p
            let xs = cos * x + sin * y + center;
            let ys = -sin * x + cos * y + center;
            let x0 = xs.floor();
            let y0 = ys.floor();
            let fx = xs - x0;
            let fy = ys - y0;
            let mut tap: BilinearTap = [(u32::MAX, 0.0); 4];
            let corners = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x0 + 1.0, (1.0 - fy) * fx),
                (y0 + 1.0, x0, fy * (1.0 - fx)),
                (y0 + 1.0, x0 + 1.0, fy * fx),
            ];
            for (slot, (ry, cx, w)) in tap.iter_mut().zip(corners) {
                let inside = (0.0..IMAGE_SIDE as f64).contains(&ry)
                    && (0.0..IMAGE_SIDE as f64).contains(&cx);
                if inside && w > 0.0 {
                    *slot = ((ry as u32) * IMAGE_SIDE as u32 + cx as u32, w as f32);
                }
            }
            table.push(tap);
        }
    }
    Ok(TaskSpec {
        transform: Transform::Rotation {
            angle_degrees,
            table,
        },
        label_count: 10,
        id: Some(format!("rot-{angle_degrees:.0}")),
    })
}

/// Split task over a distinct class subset; labels remap to ascending order.
pub fn make_split_task(class_subset: &[u8]) -> Result<TaskSpec> {
    let mut classes = class_subset.to_vec();
    classes.sort_unstable();
    if classes.len() < 2 {
        return Err(Error::Config("split needs at least 2 classes".into()));
    }
    if classes.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("duplicate class in split subset".into()));
    }
    if classes.iter().any(|&c| c > 9) {
        return Err(Error::Config("unknown class in split subset".into()));
    }
    let label_count = classes.len();
    let id = Some(format!(
        "split-{}",
        classes
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join("")
    ));
    Ok(TaskSpec {
        transform: Transform::Split { classes },
        label_count,
        id,
    })
}

/// Which half of the 90/10 partition to stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// A task bound to loaded data, with a fixed 90/10 train/validation split.
pub struct Task {
    data: Arc<MnistData>,
    pub spec: TaskSpec,
    train_idx: Vec<u32>,
    val_idx: Vec<u32>,
}

impl Task {
    pub fn new(data: Arc<MnistData>, spec: TaskSpec, split_seed: u64) -> Task {
        let mut idx: Vec<u32> = match &spec.transform {
            Transform::Split { classes } => (0..data.count as u32)
                .filter(|&i| classes.contains(&data.labels[i as usize]))
                .collect(),
            _ => (0..data.count as u32).collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
        idx.shuffle(&mut rng);
        let n_train = idx.len() * 9 / 10;
        let val_idx = idx.split_off(n_train);
        Task {
            data,
            spec,
            train_idx: idx,
            val_idx,
        }
    }

    pub fn id(&self) -> Option<&str> {
        self.spec.id.as_deref()
    }

    pub fn label_count(&self) -> usize {
        self.spec.label_count
    }

    /// Total items in the task (before the train/val split).
    pub fn num_items(&self) -> usize {
        self.train_idx.len() + self.val_idx.len()
    }

    pub fn split_len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_idx.len(),
            Split::Val => self.val_idx.len(),
        }
    }

    fn label_of(&self, item: u32) -> usize {
        let raw = self.data.labels[item as usize];
        match &self.spec.transform {
            Transform::Split { classes } => {
                classes.iter().position(|&c| c == raw).expect("filtered")
            }
            _ => raw as usize,
        }
    }

    /// Writes the transformed, [0,1]-normalized image into `out`.
    fn render(&self, item: u32, out: &mut [f32]) {
        let img = self.data.image(item as usize);
        match &self.spec.transform {
            Transform::Permutation { perm, .. } => {
                for (o, &p) in out.iter_mut().zip(perm) {
                    *o = img[p as usize] as f32 / 255.0;
                }
            }
            Transform::Rotation { table, .. } => {
                for (o, tap) in out.iter_mut().zip(table) {
                    let mut acc = 0.0f32;
                    for &(src, w) in tap {
                        if src != u32::MAX {
                            acc += w * img[src as usize] as f32;
                        }
                    }
                    *o = acc / 255.0;
                }
            }
            Transform::Split { .. } => {
                for (o, &p) in out.iter_mut().zip(img) {
                    *o = p as f32 / 255.0;
                }
            }
        }
    }

    /// Deterministic batch stream for one epoch. Training order is a function
    /// of `(order_seed, epoch)`; validation order is fixed. The final partial
    /// batch is kept.
    pub fn batches(
        &self,
        split: Split,
        batch_size: usize,
        order_seed: u64,
        epoch: u64,
    ) -> Result<BatchIter<'_>> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let mut order = match split {
            Split::Train => self.train_idx.clone(),
            Split::Val => self.val_idx.clone(),
        };
        if split == Split::Train {
            let mut h = Fnv1a::new();
            h.update_u64(order_seed);
            h.update_u64(epoch);
            let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
            order.shuffle(&mut rng);
        }
        Ok(BatchIter {
            task: self,
            order,
            batch_size,
            pos: 0,
        })
    }
}

/// One minibatch of transformed inputs and integer labels.
pub struct DataBatch {
    pub inputs: Array2<f32>,
    pub labels: Vec<usize>,
}

pub struct BatchIter<'a> {
    task: &'a Task,
    order: Vec<u32>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = DataBatch;

    fn next(&mut self) -> Option<DataBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let items = &self.order[self.pos..end];
        self.pos = end;
        let mut inputs = Array2::zeros((items.len(), IMAGE_PIXELS));
        let mut labels = Vec::with_capacity(items.len());
        for (row, &item) in inputs.outer_iter_mut().zip(items) {
            let mut row = row;
            self.task.render(item, row.as_slice_mut().unwrap());
            labels.push(self.task.label_of(item));
        }
        Some(DataBatch { inputs, labels })
    }
}
