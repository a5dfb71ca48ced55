//! Results persistence: a flat per-cell CSV, a JSON summary with box-plot
//! statistics per experiment group, and per-figure data files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

use super::run::RunRecord;

/// Box-plot style aggregate of one group of accuracies.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct GroupStats {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

/// Linear-interpolation quantile over a sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn group_stats(values: &[f64]) -> Option<GroupStats> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Some(GroupStats {
        n: sorted.len(),
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        median: quantile(&sorted, 0.5),
        q1: quantile(&sorted, 0.25),
        q3: quantile(&sorted, 0.75),
        min: sorted[0],
        max: *sorted.last().unwrap(),
    })
}

/// Emits `results.csv`, `summary.json`, and `figures/<experiment>.csv`.
pub fn report(records: &[RunRecord], output_dir: &Path) -> Result<()> {
    if records.is_empty() {
        return Ok(());
    }
    std::fs::create_dir_all(output_dir).map_err(|e| Error::DataLoad {
        path: output_dir.to_path_buf(),
        reason: format!("cannot create output dir: {e}"),
    })?;

    let mut w = csv::Writer::from_path(output_dir.join("results.csv"))?;
    w.write_record([
        "experiment",
        "cell",
        "task",
        "sparsity",
        "seed",
        "basis_size",
        "accuracy",
        "baseline_accuracy",
        "predicted",
        "runtime_secs",
        "error",
    ])?;
    for r in records {
        w.write_record([
            r.experiment.clone(),
            r.cell.clone(),
            r.task_id.clone(),
            format!("{}", r.sparsity),
            format!("{}", r.seed),
            format!("{}", r.basis_size),
            r.accuracy.map(|a| format!("{a:.6}")).unwrap_or_default(),
            r.baseline_accuracy
                .map(|a| format!("{a:.6}"))
                .unwrap_or_default(),
            r.predicted.clone().unwrap_or_default(),
            format!("{:.3}", r.runtime_secs),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;

    // group (experiment, basis_size) -> accuracies
    let mut groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for r in records {
        if let Some(acc) = r.accuracy {
            groups
                .entry((r.experiment.clone(), r.basis_size))
                .or_default()
                .push(acc);
        }
    }
    let mut summary: BTreeMap<String, GroupStats> = BTreeMap::new();
    for ((exp, n), vals) in &groups {
        if let Some(stats) = group_stats(vals) {
            summary.insert(format!("{exp}/m{n}"), stats);
        }
    }
    std::fs::write(
        output_dir.join("summary.json"),
        serde_json::to_vec_pretty(&summary)?,
    )?;

    // per-figure data: one CSV per experiment with a row per basis size
    let fig_dir = output_dir.join("figures");
    std::fs::create_dir_all(&fig_dir)?;
    let mut by_experiment: BTreeMap<String, Vec<(usize, GroupStats)>> = BTreeMap::new();
    for ((exp, n), vals) in &groups {
        if let Some(stats) = group_stats(vals) {
            by_experiment.entry(exp.clone()).or_default().push((*n, stats));
        }
    }
    for (exp, rows) in by_experiment {
        let mut w = csv::Writer::from_path(fig_dir.join(format!("{exp}.csv")))?;
        w.write_record(["basis_size", "n", "mean", "median", "q1", "q3", "min", "max"])?;
        for (size, s) in rows {
            w.write_record([
                format!("{size}"),
                format!("{}", s.n),
                format!("{:.6}", s.mean),
                format!("{:.6}", s.median),
                format!("{:.6}", s.q1),
                format!("{:.6}", s.q3),
                format!("{:.6}", s.min),
                format!("{:.6}", s.max),
            ])?;
        }
        w.flush()?;
    }
    Ok(())
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Config(format!("csv: {e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_group_collapses() {
        let s = group_stats(&[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(s.median, 0.5);
        assert_eq!(s.min, 0.5);
        assert_eq!(s.max, 0.5);
    }

    #[test]
    fn median_of_three() {
        let s = group_stats(&[0.3, 0.1, 0.2]).unwrap();
        assert!((s.median - 0.2).abs() < 1e-12);
        assert!((s.min - 0.1).abs() < 1e-12);
        assert!((s.max - 0.3).abs() < 1e-12);
    }
}
