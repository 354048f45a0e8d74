//! Deterministic random numbers, elementary distributions, and small linear algebra.

pub mod linalg;
pub mod rng;

pub use linalg::{axpy, column_mean, covariance, hadamard, l2_norm, matvec, Matrix, Vector};
pub use rng::{bernoulli, beta, normal, BetaSampler, Rng};

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}
