//! Experiment plumbing shared by the command-line tool: configuration files,
//! CSV and checkpoint I/O, evaluation, ablation sweeps, and reports.

pub mod ablation;
pub mod config;
pub mod eval;
pub mod io;
pub mod report;
pub mod svg;

use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::exec;
use crate::metrics::Metric;
use crate::trainer::train;

pub use ablation::{ablate, AblationKind, AblationPoint};
pub use config::ExperimentConfig;
pub use eval::{evaluate, EvalOptions, EvalRow};
pub use report::{report_dir, summarize, SummaryRow};

/// Train and evaluate every `(budget, run)` cell of an experiment, writing one
/// evaluation CSV and one checkpoint per cell into `out_dir`. Cells run as
/// independent jobs; each job owns its output files.
pub fn run_sweep(cfg: &ExperimentConfig, metrics: &[Metric], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let cells: Vec<(usize, usize)> =
        cfg.budgets.iter().flat_map(|&b| (0..cfg.runs).map(move |r| (b, r))).collect();
    let opts = EvalOptions {
        observations: cfg.observations,
        samples: cfg.samples,
        solver: cfg.solver,
        seed: cfg.train.seed,
    };
    exec::try_map_indexed(cells.len(), |k| {
        let (budget, run) = cells[k];
        let tc = cfg.cell(budget, run);
        let stem = format!("{}_b{}_s{}", tc.task.name(), budget, tc.seed);
        let (ckpt, _) = train(tc)?;
        ckpt.save(&out_dir.join(format!("{stem}.ofsb")))?;
        let rows = evaluate(&ckpt, metrics, &opts)?;
        let path = out_dir.join(format!("{stem}.csv"));
        eval::write_eval_csv(&path, &rows, false)?;
        Ok(path)
    })
}
