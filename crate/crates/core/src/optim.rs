//! Adam, global-norm clipping, EMA weights and the warmup + cosine schedule.
//! All of it operates on flat parameter buffers.

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// One bias-corrected Adam update. Non-finite gradients abort with the step
/// and learning rate attached.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} state",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            step: state.step + 1,
            lr,
            detail: format!("non-finite gradient {} at parameter {i}", grads[i]),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Scale `grads` so the global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = crate::numerics::l2_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

/// `ema <- decay * ema + (1 - decay) * params`
pub fn ema_update(ema: &mut [f64], params: &[f64], decay: f64) {
    debug_assert_eq!(ema.len(), params.len());
    let keep = 1.0 - decay;
    for (e, &p) in ema.iter_mut().zip(params) {
        *e = decay * *e + keep * p;
    }
}

/// Linear warmup to `peak`, then cosine decay to zero at `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: u64,
    pub total: u64,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup: u64, total: u64) -> Result<Self> {
        if !(peak > 0.0 && peak.is_finite()) {
            return Err(invalid(format!("peak learning rate must be positive and finite, got {peak}")));
        }
        if total == 0 || warmup >= total {
            return Err(invalid(format!("need warmup < total, got {warmup} and {total}")));
        }
        Ok(Self { peak, warmup, total })
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        let step = step.min(self.total);
        let progress = (step - self.warmup) as f64 / (self.total - self.warmup) as f64;
        self.peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
