//! Two-sample metrics: classifier two-sample test, unbiased MMD², per-dimension
//! Kolmogorov-Smirnov, and posterior-mean squared error.

mod classifier;

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};

pub use classifier::{ClassifierConfig, Mlp};

use crate::error::{invalid, shape_err, Error, Result};
use crate::exec;
use crate::numerics::Rng;

pub const C2ST_FOLDS: usize = 5;
pub const C2ST_MIN_ROWS: usize = 100;
/// Cap on the pooled points used for the median-distance bandwidth.
pub const MEDIAN_SUBSAMPLE: usize = 5000;
const KERNEL_ROWS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    C2st,
    Mmd,
    Ks,
    Mse,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::C2st => "c2st",
            Metric::Mmd => "mmd",
            Metric::Ks => "ks",
            Metric::Mse => "mse",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "c2st" => Ok(Metric::C2st),
            "mmd" | "mmd2" => Ok(Metric::Mmd),
            "ks" => Ok(Metric::Ks),
            "mse" => Ok(Metric::Mse),
            other => Err(invalid(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub metric: Metric,
    pub value: f64,
    pub n_per_set: usize,
    pub seed: u64,
    /// Extra numbers such as the kernel bandwidth or the fold count.
    pub aux: Vec<(String, f64)>,
}

fn check_pair(a: &ArrayView2<f64>, b: &ArrayView2<f64>, min_rows: usize) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(shape_err(format!("sample sets have {} and {} columns", a.ncols(), b.ncols())));
    }
    if a.nrows() < min_rows || b.nrows() < min_rows {
        return Err(invalid(format!(
            "need at least {min_rows} rows per set, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    if a.iter().chain(b.iter()).any(|x| !x.is_finite()) {
        return Err(Error::Data("sample sets contain non-finite values".into()));
    }
    Ok(())
}

/// Classifier two-sample test: mean held-out accuracy over 5 folds of an MLP
/// trained to tell `a` from `b` after pooled standardization.
pub fn c2st(a: ArrayView2<f64>, b: ArrayView2<f64>, rng: &Rng) -> Result<f64> {
    c2st_with(a, b, &ClassifierConfig::for_dim(a.ncols()), rng)
}

pub fn c2st_with(a: ArrayView2<f64>, b: ArrayView2<f64>, cfg: &ClassifierConfig, rng: &Rng) -> Result<f64> {
    check_pair(&a, &b, C2ST_MIN_ROWS)?;
    let mut x = concatenate(Axis(0), &[a.view(), b.view()]).expect("same width");
    for mut col in x.columns_mut() {
        let n = col.len() as f64;
        let mean = col.sum() / n;
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt().max(1e-12);
        col.mapv_inplace(|v| (v - mean) / std);
    }
    let y: Array1<f64> = (0..x.nrows()).map(|i| if i < a.nrows() { 0.0 } else { 1.0 }).collect();
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    rng.substream(u64::MAX).shuffle(&mut order);
    let folds = exec::chunk_ranges(order.len(), order.len().div_ceil(C2ST_FOLDS));
    let accs = exec::try_map_indexed(folds.len(), |k| {
        let test: Vec<usize> = order[folds[k].clone()].to_vec();
        let train: Vec<usize> = order
            .iter()
            .enumerate()
            .filter(|(i, _)| !folds[k].contains(i))
            .map(|(_, &r)| r)
            .collect();
        let mut r = rng.substream(k as u64);
        let xt = classifier::rows(&x, &train);
        let yt = y.select(Axis(0), &train);
        let net = classifier::fit(xt.view(), yt.view(), cfg, &mut r)?;
        Ok(net.accuracy(classifier::rows(&x, &test).view(), y.select(Axis(0), &test).view()))
    })?;
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise Euclidean distance over the pooled set, using at most
/// [`MEDIAN_SUBSAMPLE`] evenly strided points.
pub fn median_bandwidth(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    let pooled = concatenate(Axis(0), &[a.view(), b.view()]).map_err(|e| shape_err(e.to_string()))?;
    let n = pooled.nrows();
    let stride = n.div_ceil(MEDIAN_SUBSAMPLE).max(1);
    let pts: Vec<Vec<f64>> = (0..n).step_by(stride).map(|i| pooled.row(i).to_vec()).collect();
    let m = pts.len();
    let mut d: Vec<f64> = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            d.push(sq_dist(&pts[i], &pts[j]).sqrt());
        }
    }
    if d.is_empty() {
        return Err(invalid("bandwidth undefined: fewer than two points"));
    }
    let mid = d.len() / 2;
    let (_, &mut hi, _) = d.select_nth_unstable_by(mid, |x, y| x.total_cmp(y));
    let med = if d.len() % 2 == 1 {
        hi
    } else {
        let lo = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    };
    let h = med;
    if !(h > 0.0) {
        return Err(invalid("bandwidth undefined: median pairwise distance is zero"));
    }
    Ok(h)
}

/// Sum of `k(x_i, y_j)` over all pairs (or `i != j` when `same` is set).
fn kernel_sum(x: &Array2<f64>, y: &Array2<f64>, gamma: f64, same: bool) -> f64 {
    let ranges = exec::chunk_ranges(x.nrows(), KERNEL_ROWS);
    let parts = exec::map_indexed(ranges.len(), |c| {
        let mut s = 0.0;
        for i in ranges[c].clone() {
            let xi = x.row(i);
            let xi = xi.as_slice().expect("standard layout");
            for j in 0..y.nrows() {
                if same && i == j {
                    continue;
                }
                s += (-gamma * sq_dist(xi, y.row(j).as_slice().expect("standard layout"))).exp();
            }
        }
        s
    });
    parts.into_iter().sum()
}

/// Unbiased MMD² with a Gaussian kernel at a fixed bandwidth `h`.
pub fn mmd2_unbiased_with_bandwidth(a: ArrayView2<f64>, b: ArrayView2<f64>, h: f64) -> Result<f64> {
    check_pair(&a, &b, 2)?;
    if !(h > 0.0 && h.is_finite()) {
        return Err(invalid(format!("bandwidth must be positive, got {h}")));
    }
    let (a, b) = (a.as_standard_layout().into_owned(), b.as_standard_layout().into_owned());
    let gamma = 1.0 / (2.0 * h * h);
    let (n, m) = (a.nrows() as f64, b.nrows() as f64);
    let kaa = kernel_sum(&a, &a, gamma, true) / (n * (n - 1.0));
    let kbb = kernel_sum(&b, &b, gamma, true) / (m * (m - 1.0));
    let kab = kernel_sum(&a, &b, gamma, false) / (n * m);
    Ok(kaa + kbb - 2.0 * kab)
}

/// Unbiased MMD² with the median-heuristic bandwidth. Returns `(mmd2, h)`.
pub fn mmd2_unbiased(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<(f64, f64)> {
    check_pair(&a, &b, 2)?;
    let h = median_bandwidth(a, b)?;
    Ok((mmd2_unbiased_with_bandwidth(a, b, h)?, h))
}

/// Two-sample Kolmogorov-Smirnov statistic for each column.
pub fn ks_per_dim(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Vec<f64>> {
    check_pair(&a, &b, 1)?;
    Ok((0..a.ncols())
        .map(|j| {
            let mut x: Vec<f64> = a.column(j).to_vec();
            let mut y: Vec<f64> = b.column(j).to_vec();
            x.sort_by(f64::total_cmp);
            y.sort_by(f64::total_cmp);
            ks_sorted(&x, &y)
        })
        .collect())
}

fn ks_sorted(x: &[f64], y: &[f64]) -> f64 {
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j, mut best) = (0, 0, 0.0f64);
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        // step past every copy of v in both samples before comparing the CDFs
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        best = best.max((i as f64 / n - j as f64 / m).abs());
    }
    best
}

/// `||mean(samples) - theta_true||² / d_theta`
pub fn posterior_mean_mse(samples: ArrayView2<f64>, theta_true: &[f64]) -> Result<f64> {
    if samples.nrows() == 0 {
        return Err(invalid("no samples"));
    }
    if samples.ncols() != theta_true.len() {
        return Err(shape_err(format!("{} sample columns, {} true values", samples.ncols(), theta_true.len())));
    }
    let mean = samples.mean_axis(Axis(0)).expect("nonempty");
    Ok(mean.iter().zip(theta_true).map(|(m, t)| (m - t) * (m - t)).sum::<f64>() / theta_true.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normal(rng: &mut Rng, n: usize, d: usize, shift: f64) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.standard_normal() + shift)
    }

    #[test]
    fn c2st_separated_gaussians() {
        let mut rng = Rng::new(1);
        let a = normal(&mut rng, 300, 2, 0.0);
        let b = normal(&mut rng, 300, 2, 10.0);
        assert!(c2st(a.view(), b.view(), &Rng::new(2)).unwrap() >= 0.99);
    }

    #[test]
    fn c2st_input_checks() {
        let mut rng = Rng::new(1);
        let a = normal(&mut rng, 50, 2, 0.0);
        let b = normal(&mut rng, 300, 2, 0.0);
        assert!(c2st(a.view(), b.view(), &Rng::new(2)).is_err());
        let c = normal(&mut rng, 300, 3, 0.0);
        assert!(c2st(b.view(), c.view(), &Rng::new(2)).is_err());
    }

    #[test]
    fn mmd_degenerate_bandwidth() {
        let a = Array2::from_elem((10, 2), 1.5);
        assert!(mmd2_unbiased(a.view(), a.view()).is_err());
    }

    #[test]
    fn mmd_identical_multisets_nonpositive() {
        let mut rng = Rng::new(4);
        let a = normal(&mut rng, 200, 2, 0.0);
        let (v, _) = mmd2_unbiased(a.view(), a.view()).unwrap();
        assert!(v <= 0.0, "{v}");
    }

    #[test]
    fn mmd_matches_closed_form_for_two_points() {
        // a = {0, 1}, b = {0, 2} in 1-d, h = 1
        let a = ndarray::array![[0.0], [1.0]];
        let b = ndarray::array![[0.0], [2.0]];
        let k = |d: f64| (-d * d / 2.0).exp();
        let want = k(1.0) + k(2.0) - 2.0 * (k(0.0) + k(2.0) + k(1.0) + k(1.0)) / 4.0;
        let got = mmd2_unbiased_with_bandwidth(a.view(), b.view(), 1.0).unwrap();
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn median_bandwidth_small_set() {
        // pooled {0, 1, 3}: distances 1, 3, 2 -> median 2
        let a = ndarray::array![[0.0], [1.0]];
        let b = ndarray::array![[3.0]];
        assert!((median_bandwidth(a.view(), b.view()).unwrap() - 2.0).abs() < 1e-15);
        // pooled {0, 1, 3, 7}: distances 1 2 3 4 6 7 -> median 3.5
        let b = ndarray::array![[3.0], [7.0]];
        assert!((median_bandwidth(a.view(), b.view()).unwrap() - 3.5).abs() < 1e-15);
    }

    #[test]
    fn mmd_permutation_invariant() {
        let mut rng = Rng::new(5);
        let a = normal(&mut rng, 150, 2, 0.0);
        let b = normal(&mut rng, 150, 2, 0.3);
        let mut perm: Vec<usize> = (0..150).collect();
        rng.shuffle(&mut perm);
        let pa = a.select(Axis(0), &perm);
        let pb = b.select(Axis(0), &perm);
        let x = mmd2_unbiased_with_bandwidth(a.view(), b.view(), 1.1).unwrap();
        let y = mmd2_unbiased_with_bandwidth(pa.view(), pb.view(), 1.1).unwrap();
        assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn ks_examples() {
        let mut rng = Rng::new(6);
        let a = normal(&mut rng, 500, 3, 0.0);
        assert!(ks_per_dim(a.view(), a.view()).unwrap().iter().all(|&k| k == 0.0));
        let n = 10_000;
        let u = Array2::from_shape_fn((n, 1), |_| rng.uniform());
        let v = Array2::from_shape_fn((n, 1), |_| rng.uniform() + 0.5);
        let k = ks_per_dim(u.view(), v.view()).unwrap()[0];
        assert!((k - 0.5).abs() < 0.03, "{k}");
        let w = Array2::from_shape_fn((n, 1), |_| rng.uniform());
        assert!(ks_per_dim(u.view(), w.view()).unwrap()[0] <= 0.03);
    }

    #[test]
    fn ks_handles_ties() {
        assert_eq!(ks_sorted(&[0.0, 0.0, 1.0], &[0.0, 1.0, 1.0]), 1.0 / 3.0);
        assert_eq!(ks_sorted(&[1.0], &[2.0]), 1.0);
    }

    #[test]
    fn mse_examples() {
        let s = ndarray::array![[1.0, 2.0], [1.0, 2.0]];
        assert_eq!(posterior_mean_mse(s.view(), &[1.0, 2.0]).unwrap(), 0.0);
        let s = ndarray::array![[1.5, 1.5], [1.5, 2.5]];
        assert!((posterior_mean_mse(s.view(), &[1.0, 1.5]).unwrap() - 0.25).abs() < 1e-15);
        assert!(posterior_mean_mse(s.slice(ndarray::s![..0, ..]), &[1.0, 1.0]).is_err());
    }
}
