//! Masked linear probability path and the weighted regression loss.
//!
//! For a data point `z1`, base draw `z0` and mask `m` (1 = observed):
//!
//! ```text
//! z_t      = m * z1 + (1 - m) * (t z1 + (1 - t) z0)
//! v_target = (1 - m) * (z1 - z0)
//! loss     = 1/|m^c| * sum_i w_i (1 - m_i) (v_i - v_target_i)^2
//! ```
//!
//! with `w_i = lambda_theta` on the parameter block and 1 on the observation block.

use ndarray::{s, Array2, ArrayView2};

use crate::error::{invalid, shape_err, Error, Result};
use crate::exec;
use crate::masking::Mask;
use crate::numerics::{BetaSampler, Rng};
use crate::vfnet::VectorFieldParams;

/// Rows per gradient shard. Fixed so the reduction order never depends on
/// the number of worker threads.
pub const SHARD_ROWS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TimeSchedule {
    Uniform,
    /// Beta(1/2, 1/2): extra mass near both ends of the path.
    UShaped,
}

impl TimeSchedule {
    pub fn name(&self) -> &'static str {
        match self {
            TimeSchedule::Uniform => "uniform",
            TimeSchedule::UShaped => "ushaped",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "uniform" => Ok(TimeSchedule::Uniform),
            "ushaped" | "u-shaped" | "u_shaped" => Ok(TimeSchedule::UShaped),
            other => Err(invalid(format!("unknown time schedule {other:?}"))),
        }
    }
}

/// Draws path times according to a [`TimeSchedule`].
#[derive(Clone, Copy, Debug)]
pub struct TimeSampler {
    arcsine: Option<BetaSampler>,
}

impl TimeSampler {
    pub fn new(schedule: TimeSchedule) -> Self {
        let arcsine = match schedule {
            TimeSchedule::Uniform => None,
            TimeSchedule::UShaped => Some(BetaSampler::new(0.5, 0.5).expect("valid shape")),
        };
        Self { arcsine }
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match &self.arcsine {
            None => rng.uniform(),
            Some(b) => b.sample(rng),
        }
    }
}

pub fn sample_time(rng: &mut Rng, schedule: TimeSchedule) -> f64 {
    TimeSampler::new(schedule).sample(rng)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_theta: f64,
    pub time_schedule: TimeSchedule,
}

impl LossConfig {
    /// Default balancing `lambda_theta = d_y / d_theta`.
    pub fn for_dims(d_theta: usize, d_y: usize) -> Self {
        Self { lambda_theta: d_y as f64 / d_theta as f64, time_schedule: TimeSchedule::Uniform }
    }

    pub fn weights(&self, d_theta: usize, d_y: usize) -> Result<Vec<f64>> {
        if !(self.lambda_theta > 0.0 && self.lambda_theta.is_finite()) {
            return Err(invalid(format!("lambda_theta must be positive, got {}", self.lambda_theta)));
        }
        Ok((0..d_theta + d_y)
            .map(|i| if i < d_theta { self.lambda_theta } else { 1.0 })
            .collect())
    }
}

fn check_lengths(z0: &[f64], z1: &[f64], m: &Mask) -> Result<()> {
    if z0.len() != z1.len() || z0.len() != m.len() {
        return Err(shape_err(format!(
            "path lengths differ: z0 {}, z1 {}, mask {}",
            z0.len(),
            z1.len(),
            m.len()
        )));
    }
    Ok(())
}

pub fn interpolate(z0: &[f64], z1: &[f64], m: &Mask, t: f64) -> Result<Vec<f64>> {
    check_lengths(z0, z1, m)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("t must lie in [0,1], got {t}")));
    }
    Ok(z0
        .iter()
        .zip(z1)
        .zip(m.bits())
        .map(|((&a, &b), &obs)| if obs { b } else { t * b + (1.0 - t) * a })
        .collect())
}

pub fn target_velocity(z0: &[f64], z1: &[f64], m: &Mask) -> Result<Vec<f64>> {
    check_lengths(z0, z1, m)?;
    Ok(z0
        .iter()
        .zip(z1)
        .zip(m.bits())
        .map(|((&a, &b), &obs)| if obs { 0.0 } else { b - a })
        .collect())
}

/// One training tuple on the masked path.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSample {
    pub z0: Vec<f64>,
    pub z1: Vec<f64>,
    pub t: f64,
    pub mask: Mask,
    pub z_t: Vec<f64>,
    pub v_target: Vec<f64>,
}

impl PathSample {
    pub fn new(z0: Vec<f64>, z1: Vec<f64>, mask: Mask, t: f64) -> Result<Self> {
        let z_t = interpolate(&z0, &z1, &mask, t)?;
        let v_target = target_velocity(&z0, &z1, &mask)?;
        Ok(Self { z0, z1, t, mask, z_t, v_target })
    }

    /// Base draw is standard normal on generated coordinates and zero on
    /// observed ones.
    pub fn draw(rng: &mut Rng, z1: Vec<f64>, mask: Mask, t: f64) -> Result<Self> {
        let z0 = base_draw(rng, &mask);
        Self::new(z0, z1, mask, t)
    }
}

pub(crate) fn base_draw(rng: &mut Rng, mask: &Mask) -> Vec<f64> {
    mask.bits().iter().map(|&obs| if obs { 0.0 } else { rng.standard_normal() }).collect()
}

/// Row-major batch of path samples, ready for the network.
#[derive(Clone, Debug)]
pub struct PathBatch {
    pub z_t: Array2<f64>,
    pub mask: Array2<f64>,
    pub t: Vec<f64>,
    pub v_target: Array2<f64>,
}

impl PathBatch {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            z_t: Array2::zeros((n, d)),
            mask: Array2::zeros((n, d)),
            t: vec![0.0; n],
            v_target: Array2::zeros((n, d)),
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Fill row `i` from `(z0, z1, mask, t)` without allocating.
    pub fn set_row(&mut self, i: usize, z0: &[f64], z1: &[f64], mask: &[bool], t: f64) {
        for (j, &obs) in mask.iter().enumerate() {
            if obs {
                self.z_t[[i, j]] = z1[j];
                self.mask[[i, j]] = 1.0;
                self.v_target[[i, j]] = 0.0;
            } else {
                self.z_t[[i, j]] = t * z1[j] + (1.0 - t) * z0[j];
                self.mask[[i, j]] = 0.0;
                self.v_target[[i, j]] = z1[j] - z0[j];
            }
        }
        self.t[i] = t;
    }

    pub fn from_samples(samples: &[PathSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::InvalidBatch("empty batch".into()))?;
        let d = first.z1.len();
        let mut b = Self::zeros(samples.len(), d);
        for (i, s) in samples.iter().enumerate() {
            if s.z1.len() != d {
                return Err(shape_err("batch rows have different lengths"));
            }
            b.z_t.row_mut(i).assign(&ndarray::ArrayView1::from(&s.z_t));
            b.mask.row_mut(i).assign(&ndarray::ArrayView1::from(&s.mask.to_f64()));
            b.v_target.row_mut(i).assign(&ndarray::ArrayView1::from(&s.v_target));
            b.t[i] = s.t;
        }
        Ok(b)
    }

    fn rows(&self, r: std::ops::Range<usize>) -> (ArrayView2<'_, f64>, ArrayView2<'_, f64>, &[f64], ArrayView2<'_, f64>) {
        (
            self.z_t.slice(s![r.clone(), ..]),
            self.mask.slice(s![r.clone(), ..]),
            &self.t[r.clone()],
            self.v_target.slice(s![r, ..]),
        )
    }
}

/// Loss contribution and upstream gradient `dL/dv` for predictions `pred`.
///
/// Returns `(sum_i loss_i * scale, scale * d loss_i / d v_i)` where `loss_i` is
/// the per-sample masked loss. Observed coordinates get exactly zero upstream.
pub fn masked_loss(
    pred: ArrayView2<f64>,
    mask: ArrayView2<f64>,
    target: ArrayView2<f64>,
    weights: &[f64],
    scale: f64,
) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != target.dim() || pred.dim() != mask.dim() || weights.len() != pred.ncols() {
        return Err(shape_err(format!(
            "loss shapes: pred {:?}, mask {:?}, target {:?}, weights {}",
            pred.dim(),
            mask.dim(),
            target.dim(),
            weights.len()
        )));
    }
    let mut upstream = Array2::zeros(pred.dim());
    let mut total = 0.0;
    for (i, ((p, m), v)) in pred.rows().into_iter().zip(mask.rows()).zip(target.rows()).enumerate() {
        let free = m.iter().filter(|&&x| x == 0.0).count();
        if free == 0 {
            return Err(Error::InvalidBatch(format!("row {i} has no generated coordinate")));
        }
        let inv = scale / free as f64;
        let mut row_loss = 0.0;
        for j in 0..weights.len() {
            if m[j] == 0.0 {
                let r = p[j] - v[j];
                row_loss += weights[j] * r * r;
                upstream[[i, j]] = 2.0 * inv * weights[j] * r;
            }
        }
        total += row_loss * inv;
    }
    Ok((total, upstream))
}

/// Mean masked loss over `batch` and its exact gradient with respect to every
/// network parameter. Shards are evaluated in parallel and summed in index order.
pub fn loss_and_grad(field: &VectorFieldParams, batch: &PathBatch, weights: &[f64]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidBatch("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let shards = exec::chunk_ranges(batch.len(), SHARD_ROWS);
    let parts = exec::try_map_indexed(shards.len(), |k| {
        let (z, m, t, v) = batch.rows(shards[k].clone());
        let trace = field.forward_trace(z, m, t)?;
        let (loss, up) = masked_loss(trace.output.view(), m, v, weights, scale)?;
        Ok((loss, field.backward(&trace, up.view())?))
    })?;
    let mut parts = parts.into_iter();
    let (mut loss, mut grad) = parts.next().expect("nonempty");
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss, grad))
}

/// Mean masked loss without gradients.
pub fn loss_only(field: &VectorFieldParams, batch: &PathBatch, weights: &[f64]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidBatch("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let shards = exec::chunk_ranges(batch.len(), SHARD_ROWS);
    let parts = exec::try_map_indexed(shards.len(), |k| {
        let (z, m, t, v) = batch.rows(shards[k].clone());
        let out = field.forward_trace(z, m, t)?.output;
        Ok(masked_loss(out.view(), m, v, weights, scale)?.0)
    })?;
    Ok(parts.into_iter().sum())
}

pub fn loss_batch(field: &VectorFieldParams, batch: &[PathSample], cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    let first = batch.first().ok_or_else(|| Error::InvalidBatch("empty batch".into()))?;
    let weights = cfg.weights(first.mask.d_theta(), first.mask.d_y())?;
    loss_and_grad(field, &PathBatch::from_samples(batch)?, &weights)
}
