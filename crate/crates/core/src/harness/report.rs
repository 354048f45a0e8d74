//! Aggregation of evaluation CSVs into a per-(task, budget, metric) summary.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::Result;
use crate::harness::eval::{read_eval_csv, EvalRow};

pub const SUMMARY_HEADER: [&str; 6] = ["task", "budget", "metric", "mean", "std", "runs"];

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub task: String,
    pub budget: usize,
    pub metric: String,
    /// Mean over runs of each run's mean over observations.
    pub mean: f64,
    /// Sample standard deviation across runs (0 for a single run).
    pub std: f64,
    pub runs: usize,
}

pub fn summarize(rows: &[EvalRow]) -> Vec<SummaryRow> {
    // (task, budget, metric) -> seed -> values
    let mut groups: BTreeMap<(String, usize, String), BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.task.name().to_string(), r.budget, r.metric.name().to_string()))
            .or_default()
            .entry(r.seed)
            .or_default()
            .push(r.value);
    }
    groups
        .into_iter()
        .map(|((task, budget, metric), runs)| {
            let per_run: Vec<f64> = runs.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
            let n = per_run.len();
            let mean = per_run.iter().sum::<f64>() / n as f64;
            let std = if n < 2 {
                0.0
            } else {
                (per_run.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            };
            SummaryRow { task, budget, metric, mean, std, runs: n }
        })
        .collect()
}

/// Summarize every evaluation CSV in `dir` (others are skipped) into `out`.
/// Returns the number of summary rows.
pub fn report_dir(dir: &Path, out: &Path) -> Result<usize> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv") && p != out)
        .collect();
    paths.sort();
    let mut rows = Vec::new();
    for p in &paths {
        if let Some(mut r) = read_eval_csv(p)? {
            rows.append(&mut r);
        }
    }
    let summary = summarize(&rows);
    let mut w = csv::Writer::from_path(out).map_err(|e| crate::Error::Data(e.to_string()))?;
    let map = |e: csv::Error| crate::Error::Data(e.to_string());
    w.write_record(SUMMARY_HEADER).map_err(map)?;
    for s in &summary {
        w.write_record([
            s.task.clone(),
            s.budget.to_string(),
            s.metric.clone(),
            s.mean.to_string(),
            s.std.to_string(),
            s.runs.to_string(),
        ])
        .map_err(map)?;
    }
    w.flush()?;
    Ok(summary.len())
}
