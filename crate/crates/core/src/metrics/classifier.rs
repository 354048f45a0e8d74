//! Two-hidden-layer GELU network for binary classification, trained with
//! minibatch Adam and early stopping on a holdout split.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::Result;
use crate::numerics::{normal_cdf, normal_pdf, Rng};
use crate::optim::{adam_step, AdamConfig, AdamState};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of the training rows held out for early stopping.
    pub holdout: f64,
    /// Epochs without a holdout-accuracy gain of at least `tol` before stopping.
    pub patience: usize,
    pub tol: f64,
}

impl ClassifierConfig {
    pub fn for_dim(d: usize) -> Self {
        Self { hidden: 10 * d, max_epochs: 500, batch_size: 200, lr: 1e-3, holdout: 0.2, patience: 10, tol: 1e-4 }
    }
}

#[derive(Clone, Copy, Debug)]
struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    len: usize,
}

impl Offsets {
    fn new(d: usize, h: usize) -> Self {
        let w1 = 0;
        let b1 = w1 + d * h;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + h;
        Self { w1, b1, w2, b2, w3, b3, len: b3 + 1 }
    }
}

pub struct Mlp {
    d: usize,
    h: usize,
    off: Offsets,
    pub(crate) params: Vec<f64>,
}

struct Cache {
    pre1: Array2<f64>,
    act1: Array2<f64>,
    pre2: Array2<f64>,
    act2: Array2<f64>,
    logits: Array1<f64>,
}

fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(d: usize, h: usize, rng: &mut Rng) -> Self {
        let off = Offsets::new(d, h);
        let mut params = vec![0.0; off.len];
        for (start, fan_in, fan_out) in [(off.w1, d, h), (off.w2, h, h), (off.w3, h, 1)] {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut params[start..start + fan_in * fan_out] {
                *p = rng.uniform_in(-bound, bound);
            }
        }
        Self { d, h, off, params }
    }

    fn mat(&self, off: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((rows, cols), &self.params[off..off + rows * cols]).expect("layout")
    }

    fn vec(&self, off: usize, n: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[off..off + n])
    }

    fn forward(&self, x: ArrayView2<f64>) -> Cache {
        let (d, h, o) = (self.d, self.h, self.off);
        let pre1 = x.dot(&self.mat(o.w1, d, h)) + self.vec(o.b1, h);
        let act1 = pre1.mapv(gelu);
        let pre2 = act1.dot(&self.mat(o.w2, h, h)) + self.vec(o.b2, h);
        let act2 = pre2.mapv(gelu);
        let logits = act2.dot(&self.vec(o.w3, h)) + self.params[o.b3];
        Cache { pre1, act1, pre2, act2, logits }
    }

    pub fn logits(&self, x: ArrayView2<f64>) -> Array1<f64> {
        self.forward(x).logits
    }

    /// Mean binary cross-entropy and its gradient.
    pub fn loss_grad(&self, x: ArrayView2<f64>, y: ArrayView1<f64>) -> (f64, Vec<f64>) {
        let (d, h, o) = (self.d, self.h, self.off);
        let n = x.nrows() as f64;
        let c = self.forward(x);
        let loss = c.logits.iter().zip(y).map(|(&z, &t)| softplus(z) - t * z).sum::<f64>() / n;
        let g_out: Array1<f64> = c.logits.iter().zip(y).map(|(&z, &t)| (sigmoid(z) - t) / n).collect();
        let mut grad = vec![0.0; o.len];
        grad[o.b3] = g_out.sum();
        let g_w3 = c.act2.t().dot(&g_out);
        grad[o.w3..o.w3 + h].copy_from_slice(g_w3.as_slice().unwrap());
        let g_out2 = g_out.view().insert_axis(Axis(1));
        let w3 = self.vec(o.w3, h).insert_axis(Axis(0));
        let mut g2 = g_out2.dot(&w3);
        g2.zip_mut_with(&c.pre2, |g, &p| *g *= gelu_grad(p));
        let g_w2 = c.act1.t().dot(&g2);
        grad[o.w2..o.w2 + h * h].copy_from_slice(g_w2.as_standard_layout().as_slice().unwrap());
        grad[o.b2..o.b2 + h].copy_from_slice(g2.sum_axis(Axis(0)).as_slice().unwrap());
        let mut g1 = g2.dot(&self.mat(o.w2, h, h).t());
        g1.zip_mut_with(&c.pre1, |g, &p| *g *= gelu_grad(p));
        let g_w1 = x.t().dot(&g1);
        grad[o.w1..o.w1 + d * h].copy_from_slice(g_w1.as_standard_layout().as_slice().unwrap());
        grad[o.b1..o.b1 + h].copy_from_slice(g1.sum_axis(Axis(0)).as_slice().unwrap());
        (loss, grad)
    }

    pub fn accuracy(&self, x: ArrayView2<f64>, y: ArrayView1<f64>) -> f64 {
        let logits = self.logits(x);
        let hits = logits.iter().zip(y).filter(|(&z, &t)| (z > 0.0) == (t > 0.5)).count();
        hits as f64 / y.len() as f64
    }
}

/// Fit a classifier on `(x, y)` with early stopping and return the best-holdout weights.
pub fn fit(x: ArrayView2<f64>, y: ArrayView1<f64>, cfg: &ClassifierConfig, rng: &mut Rng) -> Result<Mlp> {
    let n = x.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let n_hold = ((n as f64 * cfg.holdout).round() as usize).clamp(1, n - 1);
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let xh = x.select(Axis(0), hold_idx);
    let yh = y.select(Axis(0), hold_idx);
    let xt = x.select(Axis(0), train_idx);
    let yt = y.select(Axis(0), train_idx);

    let mut net = Mlp::new(x.ncols(), cfg.hidden, rng);
    let mut adam = AdamState::new(net.params.len());
    let adam_cfg = AdamConfig::default();
    let mut best = (net.accuracy(xh.view(), yh.view()), net.params.clone());
    let mut stale = 0;
    let mut rows: Vec<usize> = (0..xt.nrows()).collect();
    let bs = cfg.batch_size.min(rows.len()).max(1);
    for _ in 0..cfg.max_epochs {
        rng.shuffle(&mut rows);
        for chunk in rows.chunks(bs) {
            let xb = xt.select(Axis(0), chunk);
            let yb = yt.select(Axis(0), chunk);
            let (_, grad) = net.loss_grad(xb.view(), yb.view());
            adam_step(&mut net.params, &grad, &mut adam, cfg.lr, &adam_cfg)?;
        }
        let acc = net.accuracy(xh.view(), yh.view());
        if acc > best.0 + cfg.tol {
            best = (acc, net.params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    net.params = best.1;
    Ok(net)
}

/// Slice helper used by the cross-validation loop.
pub(crate) fn rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(1);
        let mut net = Mlp::new(3, 4, &mut rng);
        for p in net.params.iter_mut() {
            *p += 0.1 * rng.standard_normal();
        }
        let x = Array2::from_shape_fn((7, 3), |_| rng.standard_normal());
        let y: Array1<f64> = (0..7).map(|i| (i % 2) as f64).collect();
        let (_, g) = net.loss_grad(x.view(), y.view());
        let eps = 1e-6;
        for i in 0..net.params.len() {
            let keep = net.params[i];
            net.params[i] = keep + eps;
            let up = net.loss_grad(x.view(), y.view()).0;
            net.params[i] = keep - eps;
            let down = net.loss_grad(x.view(), y.view()).0;
            net.params[i] = keep;
            let fd = (up - down) / (2.0 * eps);
            assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn stable_logistic_helpers() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn learns_a_separable_problem() {
        let mut rng = Rng::new(2);
        let n = 400;
        let x = Array2::from_shape_fn((n, 2), |(i, _)| rng.standard_normal() + if i % 2 == 0 { 3.0 } else { -3.0 });
        let y: Array1<f64> = (0..n).map(|i| ((i + 1) % 2) as f64).collect();
        let net = fit(x.view(), y.view(), &ClassifierConfig::for_dim(2), &mut rng).unwrap();
        assert!(net.accuracy(x.view(), y.view()) > 0.97);
    }
}
