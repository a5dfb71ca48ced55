//! Experiment harness CLI. A TOML config selects the experiment; subcommands
//! run the protocols, inspect artifacts, and compute storage accounting.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use impresslearn::backbone::{init_backbone, load_backbone, save_backbone, ArchSpec};
use impresslearn::edgepopup::evaluate_binary_mask;
use impresslearn::error::Result;
use impresslearn::harness::{
    builtin_presets, parse_max_tasks, report, run_experiment, storage_accounting,
    AccountingInputs, ExperimentConfig, ExperimentKind, RunRecord,
};
use impresslearn::impressions::{load_mask, Provenance};
use impresslearn::tasks::{
    default_data_dir, load_mnist_train, make_permuted_task, make_rotated_task, Task,
};

#[derive(Parser)]
#[command(name = "impresslearn", about = "Supermask continual-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create and save a frozen random backbone.
    InitBackbone {
        /// Comma-separated layer sizes, e.g. 784,300,100,10
        #[arg(long, default_value = "784,300,100,10")]
        arch: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train (or reload) the basis masks for a configured experiment.
    TrainBasis {
        #[arg(long)]
        config: PathBuf,
    },
    /// Learn α on new tasks over a heterogeneous basis (full grid).
    TrainAlpha {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a stored mask on a task.
    Eval {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Task spec: `rot:<angle>`, `perm:<seed>`
        #[arg(long)]
        task: String,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// GN-regime inference over basis tasks.
    InferGn {
        #[arg(long)]
        config: PathBuf,
        /// `alpha` (default) or `oneshot`
        #[arg(long, default_value = "alpha")]
        method: String,
    },
    /// Incorrect-mask ablation.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Hybrid mode: α for hidden layers, edge-popup output layer.
    Hybrid {
        #[arg(long)]
        config: PathBuf,
    },
    /// Storage accounting (Φ and efficiency).
    Account {
        /// Preset name; use `--list` to see them. Omit for custom inputs.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        list: bool,
        #[arg(long)]
        params: Option<u64>,
        #[arg(long)]
        depth: Option<u32>,
        #[arg(long)]
        basis: Option<u32>,
        #[arg(long)]
        rows: Option<u32>,
        /// Maximum task count; factorials allowed, e.g. `784!`
        #[arg(long)]
        max_tasks: Option<String>,
    },
    /// Rebuild results.csv / summary.json / figure files from cell records.
    Report {
        #[arg(long)]
        output_dir: PathBuf,
    },
}

fn parse_arch(text: &str) -> Result<ArchSpec> {
    let sizes = text
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<std::result::Result<Vec<usize>, _>>()
        .map_err(|e| impresslearn::Error::Config(format!("bad arch {text:?}: {e}")))?;
    ArchSpec::new(sizes)
}

fn run_config_kind(path: &PathBuf, kind: Option<ExperimentKind>) -> Result<Vec<RunRecord>> {
    let mut config = ExperimentConfig::from_toml_file(path)?;
    if let Some(kind) = kind {
        config.kind = kind;
    }
    run_experiment(&config)
}

fn print_accounting(name: &str, inputs: AccountingInputs) -> Result<()> {
    let row = storage_accounting(inputs)?;
    println!(
        "{name}: mask {:.2} kB | alpha entries {} | phi {:.3} kB | eff {:.2} (~{})",
        row.mask_kb, row.alpha_count, row.phi_kb, row.efficiency, row.efficiency_rounded
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<Vec<RunRecord>> {
    match cli.command {
        Command::InitBackbone { arch, seed, out } => {
            let net = init_backbone(&parse_arch(&arch)?, seed)?;
            save_backbone(&net, &out)?;
            println!("wrote {} (checksum {:016x})", out.display(), net.checksum());
            Ok(Vec::new())
        }
        Command::TrainBasis { config } => {
            // running the configured experiment caches the basis artifacts;
            // the cheapest way to "just build the basis" is a grid with no
            // completed cells yet, so run it as-is.
            run_config_kind(&config, None)
        }
        Command::TrainAlpha { config } => {
            run_config_kind(&config, Some(ExperimentKind::Heterogeneous))
        }
        Command::Eval {
            backbone,
            mask,
            task,
            data_dir,
        } => {
            let net = load_backbone(&backbone)?;
            let (mask, stored) = load_mask(&mask, Provenance::Random { seed: 0 })?;
            if stored != net.checksum() {
                return Err(impresslearn::Error::BackboneMismatch {
                    expected: stored,
                    actual: net.checksum(),
                });
            }
            let spec = match task.split_once(':') {
                Some(("rot", angle)) => make_rotated_task(angle.parse().map_err(|e| {
                    impresslearn::Error::Config(format!("bad angle: {e}"))
                })?)?,
                Some(("perm", seed)) => make_permuted_task(seed.parse().map_err(|e| {
                    impresslearn::Error::Config(format!("bad seed: {e}"))
                })?),
                _ => {
                    return Err(impresslearn::Error::Config(format!(
                        "unrecognized task {task:?}; expected rot:<angle> or perm:<seed>"
                    )))
                }
            };
            let data = load_mnist_train(&data_dir.unwrap_or_else(default_data_dir))?;
            let task = Task::new(std::sync::Arc::new(data), spec, 0);
            let acc = evaluate_binary_mask(&net, &mask, &task)?;
            println!("accuracy {acc:.4}");
            Ok(Vec::new())
        }
        Command::InferGn { config, method } => {
            let kind = match method.as_str() {
                "alpha" => ExperimentKind::GnAlpha,
                "oneshot" => ExperimentKind::GnOneshot,
                other => {
                    return Err(impresslearn::Error::Config(format!(
                        "unknown method {other:?}; expected alpha or oneshot"
                    )))
                }
            };
            run_config_kind(&config, Some(kind))
        }
        Command::Ablate { config } => {
            run_config_kind(&config, Some(ExperimentKind::IncorrectMask))
        }
        Command::Hybrid { config } => run_config_kind(&config, Some(ExperimentKind::Hybrid)),
        Command::Account {
            preset,
            list,
            params,
            depth,
            basis,
            rows,
            max_tasks,
        } => {
            if list {
                for (name, _) in builtin_presets() {
                    println!("{name}");
                }
                return Ok(Vec::new());
            }
            if let Some(name) = preset {
                let presets = builtin_presets();
                let (_, inputs) = presets
                    .iter()
                    .find(|(n, _)| *n == name)
                    .ok_or_else(|| {
                        impresslearn::Error::Config(format!("unknown preset {name:?}"))
                    })?;
                print_accounting(&name, *inputs)?;
            } else if let (Some(params), Some(d), Some(basis), Some(rows), Some(mt)) =
                (params, depth, basis, rows, max_tasks)
            {
                print_accounting(
                    "custom",
                    AccountingInputs {
                        num_params: params,
                        d,
                        basis_size: basis,
                        alpha_rows: rows,
                        max_tasks: parse_max_tasks(&mt)?,
                    },
                )?;
            } else {
                for (name, inputs) in builtin_presets() {
                    print_accounting(name, inputs)?;
                }
            }
            Ok(Vec::new())
        }
        Command::Report { output_dir } => {
            let cells_dir = output_dir.join("cells");
            let mut records = Vec::new();
            for entry in std::fs::read_dir(&cells_dir)? {
                let path = entry?.path();
                if path.extension().is_some_and(|e| e == "json") {
                    let record: RunRecord = serde_json::from_slice(&std::fs::read(&path)?)?;
                    records.push(record);
                }
            }
            records.sort_by(|a, b| a.cell.cmp(&b.cell));
            report(&records, &output_dir)?;
            println!("reported {} cells", records.len());
            Ok(records)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(records) => {
            let failures: Vec<_> = records.iter().filter(|r| r.error.is_some()).collect();
            for f in &failures {
                eprintln!("cell {} failed: {}", f.cell, f.error.as_deref().unwrap());
            }
            if failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
