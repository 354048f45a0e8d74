//! Scoring trained checkpoints against reference posteriors.

use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Result};
use crate::metrics::{self, Metric};
use crate::numerics::Rng;
use crate::sampler::{self, Query, SolverConfig};
use crate::tasks::{observations, Task};

// Rng streams of the evaluation seed.
pub(crate) const STREAM_OBS: u64 = 11;
pub(crate) const STREAM_MODEL: u64 = 12;
pub(crate) const STREAM_REFERENCE: u64 = 13;
pub(crate) const STREAM_METRIC: u64 = 14;

pub const EVAL_HEADER: [&str; 6] = ["task", "budget", "seed", "obs_id", "metric", "value"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub observations: usize,
    pub samples: usize,
    pub solver: SolverConfig,
    /// Seeds the held-out observations and every sampler; shared across runs
    /// so that all checkpoints are scored on the same observations.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { observations: 10, samples: 10_000, solver: SolverConfig::evaluation(), seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub task: Task,
    pub budget: usize,
    /// Training seed of the scored checkpoint.
    pub seed: u64,
    pub obs_id: usize,
    pub metric: Metric,
    pub value: f64,
}

impl EvalRow {
    pub fn record(&self) -> [String; 6] {
        [
            self.task.name().to_string(),
            self.budget.to_string(),
            self.seed.to_string(),
            self.obs_id.to_string(),
            self.metric.name().to_string(),
            self.value.to_string(),
        ]
    }
}

/// The held-out `(theta_true, y_obs)` pairs for an evaluation seed.
pub fn eval_observations(task: Task, k: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    observations(task, k, &Rng::with_stream(seed, STREAM_OBS))
}

/// Score one metric on a pair of posterior sample sets.
pub fn score(metric: Metric, model: &ndarray::Array2<f64>, reference: &ndarray::Array2<f64>, theta_true: &[f64], rng: &Rng) -> Result<f64> {
    Ok(match metric {
        Metric::C2st => metrics::c2st(model.view(), reference.view(), rng)?,
        Metric::Mmd => metrics::mmd2_unbiased(model.view(), reference.view())?.0,
        Metric::Ks => metrics::ks_per_dim(model.view(), reference.view())?.into_iter().fold(0.0, f64::max),
        Metric::Mse => metrics::posterior_mean_mse(model.view(), theta_true)?,
    })
}

/// Posterior samples for every held-out observation, scored with each metric.
pub fn evaluate(ckpt: &Checkpoint, metrics: &[Metric], opts: &EvalOptions) -> Result<Vec<EvalRow>> {
    if opts.observations == 0 {
        return Err(invalid("need at least one observation"));
    }
    if opts.samples == 0 {
        return Err(invalid("need at least one sample per observation"));
    }
    let task = ckpt.task;
    let obs = eval_observations(task, opts.observations, opts.seed);
    let model_rng = Rng::with_stream(opts.seed, STREAM_MODEL);
    let ref_rng = Rng::with_stream(opts.seed, STREAM_REFERENCE);
    let metric_rng = Rng::with_stream(opts.seed, STREAM_METRIC);
    let mut rows = Vec::new();
    for (i, (theta, y)) in obs.iter().enumerate() {
        let q = Query::posterior(task.d_theta(), y, opts.samples)?;
        let model = sampler::sample(ckpt, &q, &opts.solver, &model_rng.substream(i as u64))?;
        let reference = task.reference_posterior(y, opts.samples, &mut ref_rng.substream(i as u64))?;
        for &m in metrics {
            rows.push(EvalRow {
                task,
                budget: ckpt.budget,
                seed: ckpt.seed,
                obs_id: i,
                metric: m,
                value: score(m, &model, &reference, theta, &metric_rng.substream(i as u64))?,
            });
        }
    }
    Ok(rows)
}

/// Write rows to `path`, either fresh (with header) or appended.
pub fn write_eval_csv(path: &Path, rows: &[EvalRow], append: bool) -> Result<()> {
    let exists = path.exists() && std::fs::metadata(path)?.len() > 0;
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)?;
    let mut w = csv::WriterBuilder::new().from_writer(file);
    let map = |e: csv::Error| crate::Error::Data(e.to_string());
    if !(append && exists) {
        w.write_record(EVAL_HEADER).map_err(map)?;
    }
    for r in rows {
        w.write_record(r.record()).map_err(map)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_eval_csv(path: &Path) -> Result<Option<Vec<EvalRow>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| crate::Error::Data(e.to_string()))?;
    let header: Vec<String> = r.headers().map_err(|e| crate::Error::Data(e.to_string()))?.iter().map(str::to_string).collect();
    if header != EVAL_HEADER {
        return Ok(None);
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| crate::Error::Data(e.to_string()))?;
        let bad = || crate::Error::Data(format!("{}: malformed row {:?}", path.display(), rec));
        rows.push(EvalRow {
            task: Task::parse(&rec[0])?,
            budget: rec[1].parse().map_err(|_| bad())?,
            seed: rec[2].parse().map_err(|_| bad())?,
            obs_id: rec[3].parse().map_err(|_| bad())?,
            metric: Metric::parse(&rec[4])?,
            value: rec[5].parse().map_err(|_| bad())?,
        });
    }
    Ok(Some(rows))
}
