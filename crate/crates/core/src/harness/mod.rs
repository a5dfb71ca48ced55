//! Experiment orchestration: protocol runners, storage accounting, and
//! machine-readable results.

pub mod accounting;
pub mod config;
pub mod hybrid;
pub mod report;
pub mod run;

pub use accounting::{
    builtin_presets, parse_max_tasks, storage_accounting, AccountingInputs, AccountingRow,
};
pub use config::{ExperimentConfig, ExperimentKind, TaskFamily, TaskGridConfig};
pub use hybrid::{train_hybrid, HybridMask};
pub use report::{group_stats, report, GroupStats};
pub use run::{run_experiment, ArtifactLedger, RunRecord};
