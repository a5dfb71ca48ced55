//! Experiment configuration: a TOML file selects the experiment kind, grid
//! axes (sparsity × seed × task), task family, and hyperparameters.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alphatrain::AlphaHyper;
use crate::checksum::Fnv1a;
use crate::edgepopup::SupermaskHyper;
use crate::error::{Error, Result};
use crate::optim::OptimizerConfig;
use crate::tasks::{make_permuted_task, make_rotated_task, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Heterogeneous,
    Homogeneous,
    RandomBasis,
    IncorrectMask,
    Hybrid,
    GnOneshot,
    GnAlpha,
    StorageTable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Rotated,
    Permuted,
}

/// Task-grid description. Basis tasks are numbered `0..basis_count`; new
/// tasks continue past them, so the two sets never overlap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskGridConfig {
    pub family: TaskFamily,
    #[serde(default = "default_basis_count")]
    pub basis_count: usize,
    #[serde(default = "default_new_count")]
    pub new_count: usize,
    /// Angle step for rotated tasks; task k is angle `k * delta_angle`.
    #[serde(default = "default_delta_angle")]
    pub delta_angle: f64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_basis_count() -> usize {
    10
}
fn default_new_count() -> usize {
    3
}
fn default_delta_angle() -> f64 {
    36.0
}

impl TaskGridConfig {
    /// Basis task k. Rotated task k is angle `k·Δ`; permuted task k uses
    /// permutation seed k (seed 0 = plain MNIST).
    pub fn basis_task(&self, k: usize) -> Result<TaskSpec> {
        match self.family {
            TaskFamily::Rotated => {
                make_rotated_task(((k as f64 * self.delta_angle) % 360.0) as f32)
            }
            TaskFamily::Permuted => Ok(make_permuted_task(k as u64)),
        }
    }

    /// New (unseen) task k: rotated tasks draw integer angles uniformly from
    /// the 1°-granularity family, excluding basis angles (seeded by
    /// `split_seed`); permuted tasks use a disjoint seed range.
    pub fn new_task(&self, k: usize) -> Result<TaskSpec> {
        match self.family {
            TaskFamily::Rotated => {
                let basis: Vec<u32> = (0..self.basis_count)
                    .map(|j| ((j as f64 * self.delta_angle) % 360.0).round() as u32)
                    .collect();
                let mut rng = ChaCha8Rng::seed_from_u64(self.split_seed ^ 0x6e65_7774_6173_6b73);
                let mut drawn = Vec::new();
                while drawn.len() <= k {
                    let angle = rng.gen_range(1..360u32);
                    if !basis.contains(&angle) && !drawn.contains(&angle) {
                        drawn.push(angle);
                    }
                }
                make_rotated_task(drawn[k] as f32)
            }
            TaskFamily::Permuted => Ok(make_permuted_task(1000 + k as u64)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default = "default_arch")]
    pub arch: Vec<usize>,
    #[serde(default = "default_sparsities")]
    pub sparsities: Vec<f32>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Basis sizes to sweep (homogeneous / random experiments).
    #[serde(default = "default_basis_sizes")]
    pub basis_sizes: Vec<usize>,
    pub tasks: TaskGridConfig,
    #[serde(default)]
    pub edgepopup: EdgePopupConfig,
    #[serde(default)]
    pub alpha: AlphaConfig,
    /// Also train a dedicated supermask per new task as a baseline column.
    #[serde(default)]
    pub compare_dedicated: bool,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_arch() -> Vec<usize> {
    vec![784, 300, 100, 10]
}
fn default_sparsities() -> Vec<f32> {
    vec![0.9]
}
fn default_seeds() -> Vec<u64> {
    vec![1]
}
fn default_basis_sizes() -> Vec<usize> {
    vec![10]
}
fn default_workers() -> usize {
    1
}

/// Edge-popup knobs as they appear in config files; sparsity comes from the
/// grid axis instead.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgePopupConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub max_train_items: Option<usize>,
}

impl Default for EdgePopupConfig {
    fn default() -> Self {
        let h = SupermaskHyper::default();
        EdgePopupConfig {
            optimizer: h.optimizer,
            epochs: h.epochs,
            batch_size: h.batch_size,
            max_train_items: None,
        }
    }
}

impl EdgePopupConfig {
    pub fn hyper(&self, sparsity: f32) -> SupermaskHyper {
        SupermaskHyper {
            sparsity,
            optimizer: self.optimizer,
            epochs: self.epochs,
            batch_size: self.batch_size,
            max_train_items: self.max_train_items,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlphaConfig {
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub lambda: f32,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub max_train_items: Option<usize>,
}

impl Default for AlphaConfig {
    fn default() -> Self {
        let h = AlphaHyper::default();
        AlphaConfig {
            optimizer: h.optimizer,
            lambda: h.lambda,
            epochs: h.epochs,
            batch_size: h.batch_size,
            max_train_items: None,
        }
    }
}

impl AlphaConfig {
    pub fn hyper(&self) -> AlphaHyper {
        AlphaHyper {
            optimizer: self.optimizer,
            lambda: self.lambda,
            epochs: self.epochs,
            batch_size: self.batch_size,
            max_train_items: self.max_train_items,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if self.sparsities.is_empty() {
            return Err(Error::Config("sparsity list is empty".into()));
        }
        if self
            .sparsities
            .iter()
            .any(|&s| !(0.0..1.0).contains(&s) || s == 0.0)
        {
            return Err(Error::Config("sparsities must lie in (0,1)".into()));
        }
        if self.tasks.basis_count == 0 && self.kind != ExperimentKind::StorageTable {
            return Err(Error::Config("basis_count must be >= 1".into()));
        }
        let needs_new_tasks = matches!(
            self.kind,
            ExperimentKind::Heterogeneous
                | ExperimentKind::Homogeneous
                | ExperimentKind::RandomBasis
                | ExperimentKind::Hybrid
        );
        if needs_new_tasks && self.tasks.new_count == 0 {
            return Err(Error::Config("new_count must be >= 1".into()));
        }
        if self.kind == ExperimentKind::Hybrid && self.arch.len() < 3 {
            return Err(Error::Config(
                "hybrid mode needs at least one hidden layer".into(),
            ));
        }
        crate::backbone::ArchSpec::new(self.arch.clone())
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Stable fingerprint of everything that affects results (paths and
    /// worker count excluded).
    pub fn fingerprint(&self) -> u64 {
        let mut stripped = self.clone();
        stripped.output_dir = PathBuf::new();
        stripped.data_dir = None;
        stripped.workers = 0;
        let json = serde_json::to_vec(&stripped).expect("config serializes");
        let mut h = Fnv1a::new();
        h.update(&json);
        h.finish()
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .unwrap_or_else(crate::tasks::default_data_dir)
    }
}
