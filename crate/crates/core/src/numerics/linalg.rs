//! Shape-checked vector/matrix helpers over ndarray.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{shape_err, Result};

pub type Vector = Array1<f64>;
pub type Matrix = Array2<f64>;

pub fn matvec(a: ArrayView2<f64>, x: ArrayView1<f64>) -> Result<Vector> {
    if a.ncols() != x.len() {
        return Err(shape_err(format!("matvec: {}x{} by {}", a.nrows(), a.ncols(), x.len())));
    }
    Ok(a.dot(&x))
}

/// y <- alpha * x + y
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(shape_err(format!("axpy: {} vs {}", x.len(), y.len())));
    }
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
    Ok(())
}

pub fn hadamard(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if x.len() != y.len() {
        return Err(shape_err(format!("hadamard: {} vs {}", x.len(), y.len())));
    }
    Ok(x.iter().zip(y).map(|(a, b)| a * b).collect())
}

pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Per-column mean of an n x d sample matrix.
pub fn column_mean(samples: ArrayView2<f64>) -> Result<Vector> {
    if samples.nrows() == 0 {
        return Err(shape_err("column_mean of an empty matrix"));
    }
    Ok(samples.mean_axis(Axis(0)).expect("nonempty"))
}

/// Unbiased sample covariance (divides by n - 1).
pub fn covariance(samples: ArrayView2<f64>) -> Result<Matrix> {
    let n = samples.nrows();
    if n < 2 {
        return Err(shape_err(format!("covariance needs >= 2 rows, got {n}")));
    }
    let mean = column_mean(samples)?;
    let centered = &samples - &mean;
    Ok(centered.t().dot(&centered) / (n as f64 - 1.0))
}
