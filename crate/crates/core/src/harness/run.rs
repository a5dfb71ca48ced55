//! Grid execution for the experiment protocols. Cells are (task, sparsity,
//! seed) combinations; every trained artifact is persisted and reloaded on
//! resume instead of retrained.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::alphatrain::{save_alpha, train_alpha, AlphaMatrix};
use crate::backbone::{init_backbone, save_backbone, ArchSpec, BackboneNet};
use crate::checksum::fnv1a;
use crate::edgepopup::{evaluate_binary_mask, evaluate_mask, train_supermask, SupermaskHyper};
use crate::error::{Error, Result};
use crate::gninfer::{
    alpha_gn_infer, gn_alpha_hyper, oneshot_entropy_infer, GnPrediction, LibraryMask, MaskLibrary,
};
use crate::impressions::{
    combine, generate_heterogeneous_basis, generate_homogeneous_basis, generate_random_basis,
    load_basis, load_mask, manifest_checksum, save_basis, save_mask, BasisMode, BasisSet,
    BinaryMask, Provenance,
};
use crate::tasks::{load_mnist_train, MnistData, Split, Task};

use super::accounting::{builtin_presets, storage_accounting};
use super::config::{ExperimentConfig, ExperimentKind};
use super::hybrid::train_hybrid;

/// One grid cell's outcome. Failures are recorded, not fatal to the grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub cell: String,
    pub task_id: String,
    pub sparsity: f32,
    pub seed: u64,
    pub basis_size: usize,
    pub accuracy: Option<f64>,
    /// Comparison column: dedicated-mask accuracy (α experiments) or plain
    /// ImpressLearn accuracy (hybrid).
    pub baseline_accuracy: Option<f64>,
    pub predicted: Option<String>,
    pub runtime_secs: f64,
    pub artifacts: Vec<PathBuf>,
    pub error: Option<String>,
}

/// Checksums of files taken at write time, re-verified later to confirm
/// that no experiment mutated stored artifacts.
#[derive(Default)]
pub struct ArtifactLedger {
    entries: Vec<(PathBuf, u64)>,
}

impl ArtifactLedger {
    pub fn record(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.entries.push((path.to_path_buf(), fnv1a(&bytes)));
        Ok(())
    }

    pub fn record_dir(&mut self, dir: &Path) -> Result<()> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            self.record(&f)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Paths whose current bytes no longer match the recorded checksum.
    pub fn verify(&self) -> Vec<PathBuf> {
        self.entries
            .iter()
            .filter(|(p, c)| std::fs::read(p).map(|b| fnv1a(&b) != *c).unwrap_or(true))
            .map(|(p, _)| p.clone())
            .collect()
    }
}

fn fmt_sparsity(s: f32) -> String {
    format!("{s:.2}")
}

/// Shared context for one (sparsity, seed) block.
struct Block<'a> {
    config: &'a ExperimentConfig,
    data: Arc<MnistData>,
    net: BackboneNet,
    sparsity: f32,
    seed: u64,
    hyper: SupermaskHyper,
    out: PathBuf,
}

impl Block<'_> {
    fn task(&self, spec: crate::tasks::TaskSpec) -> Task {
        Task::new(
            self.data.clone(),
            spec,
            self.config.tasks.split_seed.wrapping_add(self.seed),
        )
    }

    fn artifact_dir(&self) -> PathBuf {
        self.out.join("artifacts")
    }

    /// Trains or reloads a dedicated supermask for `task`.
    fn dedicated_mask(&self, task: &Task) -> Result<(BinaryMask, PathBuf)> {
        let dir = self.artifact_dir().join("masks");
        std::fs::create_dir_all(&dir)?;
        let file = dir.join(format!(
            "ded-{}-s{}-seed{}.imsk",
            task.id().unwrap_or("unnamed"),
            fmt_sparsity(self.sparsity),
            self.seed
        ));
        if file.exists() {
            let (mask, stored) = load_mask(
                &file,
                Provenance::Heterogeneous {
                    task_id: task.id().unwrap_or("unnamed").to_string(),
                    seed: self.seed,
                },
            )?;
            if stored == self.net.checksum() {
                return Ok((mask, file));
            }
        }
        let mask = train_supermask(&self.net, task, &self.hyper, self.seed)?;
        save_mask(&mask, self.net.checksum(), &file)?;
        Ok((mask, file))
    }

    /// Generates or reloads a basis set cached under a mode/size key.
    fn basis(&self, mode: BasisMode, size: usize, basis_tasks: &[Task]) -> Result<(BasisSet, PathBuf)> {
        let tag = match mode {
            BasisMode::Heterogeneous => "het",
            BasisMode::Homogeneous => "hom",
            BasisMode::Random => "rnd",
        };
        let dir = self.artifact_dir().join(format!(
            "basis-{tag}-n{size}-s{}-seed{}",
            fmt_sparsity(self.sparsity),
            self.seed
        ));
        if dir.join("manifest.json").exists() {
            let basis = load_basis(&dir)?;
            if basis.backbone_checksum == self.net.checksum() && basis.len() == size {
                return Ok((basis, dir));
            }
        }
        let basis = match mode {
            BasisMode::Heterogeneous => {
                generate_heterogeneous_basis(&self.net, basis_tasks, &self.hyper, self.seed)?
            }
            BasisMode::Homogeneous => generate_homogeneous_basis(
                &self.net,
                &basis_tasks[0],
                size,
                &self.hyper,
                self.seed * 10_000,
            )?,
            BasisMode::Random => {
                generate_random_basis(&self.net, self.sparsity, size, self.seed)?
            }
        };
        save_basis(&basis, &dir)?;
        Ok((basis, dir))
    }

    /// Prefix of an already-built basis; masks share seeds with the full set.
    fn basis_prefix(&self, full: &BasisSet, n: usize, full_dir: &Path) -> Result<(BasisSet, PathBuf)> {
        let prefix = BasisSet {
            masks: full.masks[..n].to_vec(),
            backbone_checksum: full.backbone_checksum,
            mode: full.mode,
            sparsity: full.sparsity,
        };
        let dir = full_dir.with_file_name(format!(
            "{}-prefix{n}",
            full_dir.file_name().unwrap().to_string_lossy()
        ));
        if !dir.join("manifest.json").exists() {
            save_basis(&prefix, &dir)?;
        }
        Ok((prefix, dir))
    }

    fn train_and_eval_alpha(
        &self,
        basis: &BasisSet,
        basis_dir: &Path,
        task: &Task,
    ) -> Result<(AlphaMatrix, f64, PathBuf)> {
        let alpha_hyper = self.config.alpha.hyper();
        let alpha = train_alpha(&self.net, basis, task, &alpha_hyper, self.seed)?;
        let acc = evaluate_mask(&self.net, &combine(basis, &alpha, &self.net)?, task)?;
        let dir = self.artifact_dir().join("alpha");
        std::fs::create_dir_all(&dir)?;
        let file = dir.join(format!(
            "{}-m{}-s{}-seed{}.imal",
            task.id().unwrap_or("unidentified"),
            basis.len(),
            fmt_sparsity(self.sparsity),
            self.seed
        ));
        save_alpha(&alpha, manifest_checksum(basis_dir)?, &file)?;
        Ok((alpha, acc, file))
    }
}

fn cell_path(out: &Path, cell: &str) -> PathBuf {
    out.join("cells").join(format!("{}.json", cell.replace('/', "_")))
}

fn load_cell(out: &Path, cell: &str) -> Option<RunRecord> {
    let path = cell_path(out, cell);
    let bytes = std::fs::read(path).ok()?;
    serde_json::from_slice(&bytes).ok()
}

fn store_cell(out: &Path, record: &RunRecord) -> Result<()> {
    let path = cell_path(out, &record.cell);
    std::fs::create_dir_all(path.parent().unwrap())?;
    std::fs::write(path, serde_json::to_vec_pretty(record)?)?;
    Ok(())
}

/// Runs a cell body with resume-by-fingerprint and failure capture.
fn run_cell(
    out: &Path,
    records: &mut Vec<RunRecord>,
    template: RunRecord,
    body: impl FnOnce(&mut RunRecord) -> Result<()>,
) -> Result<()> {
    if let Some(existing) = load_cell(out, &template.cell) {
        records.push(existing);
        return Ok(());
    }
    let mut record = template;
    let start = Instant::now();
    if let Err(e) = body(&mut record) {
        record.error = Some(e.to_string());
    }
    record.runtime_secs = start.elapsed().as_secs_f64();
    store_cell(out, &record)?;
    records.push(record);
    Ok(())
}

fn kind_name(kind: ExperimentKind) -> &'static str {
    match kind {
        ExperimentKind::Heterogeneous => "heterogeneous",
        ExperimentKind::Homogeneous => "homogeneous",
        ExperimentKind::RandomBasis => "random_basis",
        ExperimentKind::IncorrectMask => "incorrect_mask",
        ExperimentKind::Hybrid => "hybrid",
        ExperimentKind::GnOneshot => "gn_oneshot",
        ExperimentKind::GnAlpha => "gn_alpha",
        ExperimentKind::StorageTable => "storage_table",
    }
}

/// Executes the full grid for the configured experiment. Completed cells are
/// skipped by key; sub-operation failures land in per-cell records and the
/// grid continues.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    config.validate()?;
    std::fs::create_dir_all(&config.output_dir)?;

    if config.kind == ExperimentKind::StorageTable {
        return run_storage_table(config);
    }

    let data = Arc::new(load_mnist_train(&config.data_dir())?);
    let arch = ArchSpec::new(config.arch.clone())?;
    let mut cells: Vec<(f32, u64)> = Vec::new();
    for &sparsity in &config.sparsities {
        for &seed in &config.seeds {
            cells.push((sparsity, seed));
        }
    }
    let run_one = |&(sparsity, seed): &(f32, u64)| -> Result<Vec<RunRecord>> {
        let net = init_backbone(&arch, seed)?;
        let backbone_path = config
            .output_dir
            .join("artifacts")
            .join(format!("backbone-seed{seed}.impr"));
        std::fs::create_dir_all(backbone_path.parent().unwrap())?;
        if !backbone_path.exists() {
            save_backbone(&net, &backbone_path)?;
        }
        let block = Block {
            config,
            data: data.clone(),
            net,
            sparsity,
            seed,
            hyper: config.edgepopup.hyper(sparsity),
            out: config.output_dir.clone(),
        };
        let mut records = Vec::new();
        run_block(&block, &mut records)?;
        Ok(records)
    };
    // blocks are independent given the read-only dataset; fan out when asked
    let results: Vec<Result<Vec<RunRecord>>> = if config.workers > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| cells.par_iter().map(run_one).collect())
    } else {
        cells.iter().map(run_one).collect()
    };
    let mut records = Vec::new();
    for r in results {
        records.extend(r?);
    }
    super::report::report(&records, &config.output_dir)?;
    Ok(records)
}

fn run_block(block: &Block, records: &mut Vec<RunRecord>) -> Result<()> {
    let config = block.config;
    let name = kind_name(config.kind);
    let out = &block.out;
    let template = |cell: String, task_id: String, basis_size: usize| RunRecord {
        experiment: name.to_string(),
        cell,
        task_id,
        sparsity: block.sparsity,
        seed: block.seed,
        basis_size,
        accuracy: None,
        baseline_accuracy: None,
        predicted: None,
        runtime_secs: 0.0,
        artifacts: Vec::new(),
        error: None,
    };
    let s = fmt_sparsity(block.sparsity);

    match config.kind {
        ExperimentKind::Heterogeneous => {
            let basis_tasks: Vec<Task> = (0..config.tasks.basis_count)
                .map(|k| config.tasks.basis_task(k).map(|spec| block.task(spec)))
                .collect::<Result<_>>()?;
            let (basis, basis_dir) =
                block.basis(BasisMode::Heterogeneous, basis_tasks.len(), &basis_tasks)?;
            for k in 0..config.tasks.new_count {
                let task = block.task(config.tasks.new_task(k)?);
                let task_id = task.id().unwrap_or("unnamed").to_string();
                let cell = format!("het-m{}-s{s}-seed{}-{}", basis.len(), block.seed, task_id);
                run_cell(out, records, template(cell, task_id, basis.len()), |rec| {
                    let (_, acc, alpha_file) =
                        block.train_and_eval_alpha(&basis, &basis_dir, &task)?;
                    rec.accuracy = Some(acc);
                    rec.artifacts.push(alpha_file);
                    if config.compare_dedicated {
                        let (ded, file) = block.dedicated_mask(&task)?;
                        rec.baseline_accuracy =
                            Some(evaluate_binary_mask(&block.net, &ded, &task)?);
                        rec.artifacts.push(file);
                    }
                    Ok(())
                })?;
            }
        }
        ExperimentKind::Homogeneous | ExperimentKind::RandomBasis => {
            let mode = if config.kind == ExperimentKind::Homogeneous {
                BasisMode::Homogeneous
            } else {
                BasisMode::Random
            };
            let basis_task = block.task(config.tasks.basis_task(0)?);
            let max_n = *config.basis_sizes.iter().max().unwrap();
            let (full, full_dir) =
                block.basis(mode, max_n, std::slice::from_ref(&basis_task))?;
            for &n in &config.basis_sizes {
                let (basis, basis_dir) = block.basis_prefix(&full, n, &full_dir)?;
                for k in 0..config.tasks.new_count {
                    let task = block.task(config.tasks.new_task(k)?);
                    let task_id = task.id().unwrap_or("unnamed").to_string();
                    let cell = format!(
                        "{}-m{n}-s{s}-seed{}-{}",
                        if mode == BasisMode::Homogeneous { "hom" } else { "rnd" },
                        block.seed,
                        task_id
                    );
                    run_cell(out, records, template(cell, task_id, n), |rec| {
                        let (_, acc, alpha_file) =
                            block.train_and_eval_alpha(&basis, &basis_dir, &task)?;
                        rec.accuracy = Some(acc);
                        rec.artifacts.push(alpha_file);
                        Ok(())
                    })?;
                }
            }
        }
        ExperimentKind::IncorrectMask => {
            let source_task = block.task(config.tasks.basis_task(0)?);
            for k in 1..=config.tasks.new_count {
                let other = block.task(config.tasks.basis_task(k)?);
                let task_id = other.id().unwrap_or("unnamed").to_string();
                let cell = format!("incorrect-s{s}-seed{}-{}", block.seed, task_id);
                run_cell(out, records, template(cell, task_id, 1), |rec| {
                    let (mask, file) = block.dedicated_mask(&source_task)?;
                    rec.accuracy = Some(evaluate_binary_mask(&block.net, &mask, &other)?);
                    rec.artifacts.push(file);
                    Ok(())
                })?;
            }
        }
        ExperimentKind::Hybrid => {
            let basis_task = block.task(config.tasks.basis_task(0)?);
            let max_n = *config.basis_sizes.iter().max().unwrap();
            let (full, full_dir) = block.basis(
                BasisMode::Homogeneous,
                max_n,
                std::slice::from_ref(&basis_task),
            )?;
            for &n in &config.basis_sizes {
                let (basis, basis_dir) = block.basis_prefix(&full, n, &full_dir)?;
                for k in 0..config.tasks.new_count {
                    let task = block.task(config.tasks.new_task(k)?);
                    let task_id = task.id().unwrap_or("unnamed").to_string();
                    let cell = format!("hybrid-m{n}-s{s}-seed{}-{}", block.seed, task_id);
                    run_cell(out, records, template(cell, task_id, n), |rec| {
                        let hybrid = train_hybrid(
                            &block.net,
                            &basis,
                            &task,
                            &config.alpha.hyper(),
                            &block.hyper,
                            block.seed,
                        )?;
                        let eff = hybrid.to_effective(&block.net, &basis)?;
                        rec.accuracy = Some(evaluate_mask(&block.net, &eff, &task)?);
                        let (_, plain_acc, alpha_file) =
                            block.train_and_eval_alpha(&basis, &basis_dir, &task)?;
                        rec.baseline_accuracy = Some(plain_acc);
                        rec.artifacts.push(alpha_file);
                        Ok(())
                    })?;
                }
            }
        }
        ExperimentKind::GnAlpha => {
            let basis_tasks: Vec<Task> = (0..config.tasks.basis_count)
                .map(|k| config.tasks.basis_task(k).map(|spec| block.task(spec)))
                .collect::<Result<_>>()?;
            let (basis, _) =
                block.basis(BasisMode::Heterogeneous, basis_tasks.len(), &basis_tasks)?;
            for (j, task) in basis_tasks.iter().enumerate() {
                let task_id = task.id().unwrap_or("unnamed").to_string();
                let cell = format!("gnalpha-s{s}-seed{}-{}", block.seed, task_id);
                run_cell(out, records, template(cell, task_id, basis.len()), |rec| {
                    let dedicated =
                        evaluate_binary_mask(&block.net, &basis.masks[j], task)?;
                    let unidentified = Task::new(
                        block.data.clone(),
                        task.spec.without_identity(),
                        config.tasks.split_seed.wrapping_add(block.seed),
                    );
                    let mut hyper = gn_alpha_hyper();
                    hyper.optimizer = config.alpha.optimizer;
                    hyper.epochs = config.alpha.epochs;
                    hyper.batch_size = config.alpha.batch_size;
                    hyper.max_train_items = config.alpha.max_train_items;
                    let (alpha, report) =
                        alpha_gn_infer(&block.net, &basis, &unidentified, &hyper, block.seed)?;
                    let eff = combine(&basis, &alpha, &block.net)?;
                    rec.accuracy = Some(evaluate_mask(&block.net, &eff, task)?);
                    rec.baseline_accuracy = Some(dedicated);
                    rec.predicted = Some(match report.predicted {
                        GnPrediction::Mask(i) => format!("mask-{i}"),
                        GnPrediction::Composite => "composite".to_string(),
                    });
                    Ok(())
                })?;
            }
        }
        ExperimentKind::GnOneshot => {
            let basis_tasks: Vec<Task> = (0..config.tasks.basis_count)
                .map(|k| config.tasks.basis_task(k).map(|spec| block.task(spec)))
                .collect::<Result<_>>()?;
            let (basis, _) =
                block.basis(BasisMode::Heterogeneous, basis_tasks.len(), &basis_tasks)?;
            let mut library = MaskLibrary::new(block.net.checksum());
            for (j, mask) in basis.masks.iter().enumerate() {
                library.push(format!("mask-{j}"), LibraryMask::Binary(mask.clone()))?;
            }
            for (j, task) in basis_tasks.iter().enumerate() {
                let task_id = task.id().unwrap_or("unnamed").to_string();
                let cell = format!("gnoneshot-s{s}-seed{}-{}", block.seed, task_id);
                run_cell(out, records, template(cell, task_id, basis.len()), |rec| {
                    let batch = task
                        .batches(Split::Val, config.alpha.batch_size, block.seed, 0)?
                        .next()
                        .ok_or_else(|| Error::Config("task has no validation data".into()))?;
                    let report = oneshot_entropy_infer(&block.net, &library, &batch.inputs)?;
                    let chosen: usize = report
                        .predicted
                        .trim_start_matches("mask-")
                        .parse()
                        .unwrap_or(0);
                    rec.accuracy = Some(evaluate_binary_mask(
                        &block.net,
                        &basis.masks[chosen],
                        task,
                    )?);
                    rec.baseline_accuracy =
                        Some(evaluate_binary_mask(&block.net, &basis.masks[j], task)?);
                    rec.predicted = Some(report.predicted);
                    Ok(())
                })?;
            }
        }
        ExperimentKind::StorageTable => unreachable!("handled by run_experiment"),
    }
    Ok(())
}

fn run_storage_table(config: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    let mut rows = Vec::new();
    for (name, inputs) in builtin_presets() {
        let row = storage_accounting(inputs)?;
        rows.push(serde_json::json!({
            "model": name,
            "num_params": inputs.num_params,
            "d": inputs.d,
            "basis_size": inputs.basis_size,
            "mask_kb": row.mask_kb,
            "alpha_count": row.alpha_count,
            "phi_kb": row.phi_kb,
            "efficiency": row.efficiency,
            "efficiency_rounded": row.efficiency_rounded,
        }));
    }
    let path = config.output_dir.join("storage_table.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&rows)?)?;
    Ok(Vec::new())
}
