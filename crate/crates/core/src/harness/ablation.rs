//! Robustness sweeps: observation noise, missing observations, ODE step count.
//!
//! Every level of a sweep reuses the same observations, noise draws, missing
//! coordinates and sampler streams, so differences between levels come from
//! the level alone.

use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Result};
use crate::harness::eval::{eval_observations, score, EvalOptions, STREAM_METRIC, STREAM_MODEL, STREAM_REFERENCE};
use crate::masking::Mask;
use crate::metrics::Metric;
use crate::numerics::Rng;
use crate::sampler::{self, Block, Query, Solver, SolverConfig};
use crate::tasks::corrupt;

const STREAM_NOISE: u64 = 15;
const STREAM_MISSING: u64 = 16;

pub const NOISE_LEVELS: [f64; 6] = [0.0, 0.1, 0.25, 0.5, 0.75, 1.0];
pub const MISSING_LEVELS: [f64; 5] = [0.0, 0.3, 0.5, 0.7, 0.9];
pub const STEP_COUNTS: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 5.0];

pub const ABLATION_HEADER: [&str; 7] = ["task", "kind", "level", "metric", "mean", "std", "n_obs"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationKind {
    Noise,
    Missing,
    Steps,
}

impl AblationKind {
    pub fn name(&self) -> &'static str {
        match self {
            AblationKind::Noise => "noise",
            AblationKind::Missing => "missing",
            AblationKind::Steps => "steps",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "noise" => Ok(AblationKind::Noise),
            "missing" => Ok(AblationKind::Missing),
            "steps" => Ok(AblationKind::Steps),
            other => Err(invalid(format!("unknown ablation kind {other:?} (noise, missing, steps)"))),
        }
    }

    pub fn default_levels(&self) -> Vec<f64> {
        match self {
            AblationKind::Noise => NOISE_LEVELS.to_vec(),
            AblationKind::Missing => MISSING_LEVELS.to_vec(),
            AblationKind::Steps => STEP_COUNTS.to_vec(),
        }
    }

    pub fn metric(&self) -> Metric {
        match self {
            AblationKind::Steps => Metric::Mse,
            _ => Metric::C2st,
        }
    }

    pub fn axis_label(&self) -> &'static str {
        match self {
            AblationKind::Noise => "noise sigma",
            AblationKind::Missing => "missing fraction rho",
            AblationKind::Steps => "ODE steps K",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationPoint {
    pub level: f64,
    pub metric: Metric,
    /// One value per held-out observation.
    pub values: Vec<f64>,
}

impl AblationPoint {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn std(&self) -> f64 {
        let n = self.values.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

/// Number of observation coordinates dropped at missing fraction `rho`.
pub fn missing_count(rho: f64, d_y: usize) -> usize {
    ((rho * d_y as f64).round() as usize).min(d_y)
}

pub fn ablate(ckpt: &Checkpoint, kind: AblationKind, levels: &[f64], opts: &EvalOptions) -> Result<Vec<AblationPoint>> {
    if opts.observations == 0 || opts.samples == 0 {
        return Err(invalid("need at least one observation and one sample"));
    }
    for &l in levels {
        let ok = match kind {
            AblationKind::Noise => l >= 0.0 && l.is_finite(),
            AblationKind::Missing => (0.0..=1.0).contains(&l),
            AblationKind::Steps => l >= 1.0 && l.fract() == 0.0,
        };
        if !ok {
            return Err(invalid(format!("level {l} is not valid for the {} sweep", kind.name())));
        }
    }
    let task = ckpt.task;
    let (dt, dy) = (task.d_theta(), task.d_y());
    let obs = eval_observations(task, opts.observations, opts.seed);
    let model_rng = Rng::with_stream(opts.seed, STREAM_MODEL);
    let ref_rng = Rng::with_stream(opts.seed, STREAM_REFERENCE);
    let metric_rng = Rng::with_stream(opts.seed, STREAM_METRIC);
    let noise_rng = Rng::with_stream(opts.seed, STREAM_NOISE);
    let missing_rng = Rng::with_stream(opts.seed, STREAM_MISSING);
    let metric = kind.metric();

    let mut points: Vec<AblationPoint> =
        levels.iter().map(|&level| AblationPoint { level, metric, values: Vec::new() }).collect();
    for (i, (theta, y)) in obs.iter().enumerate() {
        let reference = match kind {
            AblationKind::Steps => None,
            _ => Some(task.reference_posterior(y, opts.samples, &mut ref_rng.substream(i as u64))?),
        };
        let mut drop_order: Vec<usize> = (0..dy).collect();
        missing_rng.substream(i as u64).shuffle(&mut drop_order);
        for p in points.iter_mut() {
            let mut solver: SolverConfig = opts.solver;
            let query = match kind {
                AblationKind::Noise => {
                    let noisy = corrupt(y, p.level, &mut noise_rng.substream(i as u64))?;
                    Query::posterior(dt, &noisy, opts.samples)?
                }
                AblationKind::Missing => {
                    let dropped = &drop_order[..missing_count(p.level, dy)];
                    let bits: Vec<bool> = (0..dt + dy).map(|j| j >= dt && !dropped.contains(&(j - dt))).collect();
                    let mask = Mask::new(bits, dt, dy)?;
                    let kept: Vec<f64> = (0..dy).filter(|j| !dropped.contains(j)).map(|j| y[j]).collect();
                    Query::from_observed(mask, &kept, Block::Theta, opts.samples)?
                }
                AblationKind::Steps => {
                    // a step sweep needs a fixed-step method; Euler unless told otherwise
                    if solver.method == Solver::AdaptiveRk45 {
                        solver.method = Solver::Euler;
                    }
                    solver.steps = p.level as usize;
                    Query::posterior(dt, y, opts.samples)?
                }
            };
            let model = sampler::sample(ckpt, &query, &solver, &model_rng.substream(i as u64))?;
            let value = match &reference {
                Some(r) => score(metric, &model, r, theta, &metric_rng.substream(i as u64))?,
                None => score(metric, &model, &model, theta, &metric_rng.substream(i as u64))?,
            };
            p.values.push(value);
        }
    }
    Ok(points)
}

pub fn write_ablation_csv(path: &Path, task: &str, kind: AblationKind, points: &[AblationPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::Error::Data(e.to_string()))?;
    let map = |e: csv::Error| crate::Error::Data(e.to_string());
    w.write_record(ABLATION_HEADER).map_err(map)?;
    for p in points {
        w.write_record([
            task.to_string(),
            kind.name().to_string(),
            p.level.to_string(),
            p.metric.name().to_string(),
            p.mean().to_string(),
            p.std().to_string(),
            p.values.len().to_string(),
        ])
        .map_err(map)?;
    }
    w.flush()?;
    Ok(())
}

/// `(level, mean)` pairs read back from an ablation CSV.
pub fn read_ablation_means(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| crate::Error::Data(e.to_string()))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| crate::Error::Data(e.to_string()))?;
        let parse = |k: usize| rec[k].parse::<f64>().map_err(|_| crate::Error::Data(format!("bad number {:?}", &rec[k])));
        out.push((parse(2)?, parse(4)?));
    }
    Ok(out)
}
