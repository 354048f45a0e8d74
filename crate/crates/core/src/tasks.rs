//! Benchmark tasks: priors, simulators, and exact reference posteriors.
//!
//! | task                      | theta prior       | simulator y given theta                   |
//! |---------------------------|-------------------|-------------------------------------------|
//! | `two_moons`               | U([-1,1]^2)       | crescent map of theta plus (a, r) noise    |
//! | `gaussian_linear`         | N(0, 0.1 I_10)    | N(theta, 0.1 I_10)                        |
//! | `gaussian_linear_uniform` | U([-1,1]^10)      | N(theta, 0.1 I_10)                        |
//! | `gaussian_mixture`        | U([-10,10]^2)     | 0.5 N(theta, I) + 0.5 N(theta, 0.01 I)    |

use std::cmp::Ordering;
use std::f64::consts::{FRAC_PI_2, SQRT_2};

use ndarray::Array2;

use crate::error::{invalid, Error, Result};
use crate::exec;
use crate::flowcore::TimeSchedule;
use crate::numerics::{normal_cdf, Rng};

const GL_VAR: f64 = 0.1;
const SIM_CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    TwoMoons,
    GaussianLinear,
    GaussianLinearUniform,
    GaussianMixture,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleKind {
    Analytic,
    Rejection,
    Inversion,
}

/// Per-task architecture and optimizer settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskDefaults {
    pub hidden: usize,
    pub blocks: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub time_schedule: TimeSchedule,
}

impl Task {
    pub const ALL: [Task; 4] = [
        Task::TwoMoons,
        Task::GaussianLinear,
        Task::GaussianLinearUniform,
        Task::GaussianMixture,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Task::TwoMoons => "two_moons",
            Task::GaussianLinear => "gaussian_linear",
            Task::GaussianLinearUniform => "gaussian_linear_uniform",
            Task::GaussianMixture => "gaussian_mixture",
        }
    }

    pub fn parse(name: &str) -> Result<Task> {
        let key = name.trim().to_ascii_lowercase().replace('-', "_");
        Task::ALL
            .into_iter()
            .find(|t| t.name() == key)
            .ok_or_else(|| invalid(format!("unknown task {name:?}")))
    }

    pub fn d_theta(&self) -> usize {
        match self {
            Task::TwoMoons | Task::GaussianMixture => 2,
            Task::GaussianLinear | Task::GaussianLinearUniform => 10,
        }
    }

    pub fn d_y(&self) -> usize {
        self.d_theta()
    }

    pub fn dim(&self) -> usize {
        self.d_theta() + self.d_y()
    }

    pub fn oracle(&self) -> OracleKind {
        match self {
            Task::TwoMoons => OracleKind::Inversion,
            Task::GaussianLinear => OracleKind::Analytic,
            Task::GaussianLinearUniform | Task::GaussianMixture => OracleKind::Rejection,
        }
    }

    pub fn defaults(&self) -> TaskDefaults {
        let row = |hidden, blocks, batch_size, peak_lr, warmup_steps, time_schedule| TaskDefaults {
            hidden,
            blocks,
            batch_size,
            peak_lr,
            warmup_steps,
            time_schedule,
        };
        match self {
            Task::TwoMoons => row(200, 4, 2048, 1e-3, 2500, TimeSchedule::Uniform),
            Task::GaussianMixture => row(128, 3, 1024, 5e-4, 1500, TimeSchedule::UShaped),
            Task::GaussianLinear => row(100, 3, 1024, 5e-4, 1000, TimeSchedule::Uniform),
            Task::GaussianLinearUniform => row(128, 3, 512, 1e-3, 2000, TimeSchedule::Uniform),
        }
    }

    /// `theta_1..theta_k, y_1..y_k`
    pub fn coordinate_names(&self) -> Vec<String> {
        (1..=self.d_theta())
            .map(|i| format!("theta_{i}"))
            .chain((1..=self.d_y()).map(|i| format!("y_{i}")))
            .collect()
    }

    fn prior_box(&self) -> Option<f64> {
        match self {
            Task::TwoMoons | Task::GaussianLinearUniform => Some(1.0),
            Task::GaussianMixture => Some(10.0),
            Task::GaussianLinear => None,
        }
    }

    pub fn in_prior_support(&self, theta: &[f64]) -> bool {
        theta.len() == self.d_theta()
            && match self.prior_box() {
                Some(b) => theta.iter().all(|x| (-b..=b).contains(x)),
                None => theta.iter().all(|x| x.is_finite()),
            }
    }

    pub fn sample_prior(&self, rng: &mut Rng) -> Vec<f64> {
        match self.prior_box() {
            Some(b) => (0..self.d_theta()).map(|_| rng.uniform_in(-b, b)).collect(),
            None => (0..self.d_theta()).map(|_| GL_VAR.sqrt() * rng.standard_normal()).collect(),
        }
    }

    pub fn simulate(&self, theta: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        if !self.in_prior_support(theta) {
            return Err(invalid(format!("theta {theta:?} outside the {} prior support", self.name())));
        }
        Ok(match self {
            Task::TwoMoons => {
                let a = rng.uniform_in(-FRAC_PI_2, FRAC_PI_2);
                let r = 0.1 + 0.01 * rng.standard_normal();
                two_moons_map([theta[0], theta[1]], a, r).to_vec()
            }
            Task::GaussianLinear | Task::GaussianLinearUniform => {
                theta.iter().map(|&x| x + GL_VAR.sqrt() * rng.standard_normal()).collect()
            }
            Task::GaussianMixture => {
                let std = if rng.uniform() < 0.5 { 1.0 } else { 0.1 };
                theta.iter().map(|&x| x + std * rng.standard_normal()).collect()
            }
        })
    }

    /// Draw `theta ~ prior`, `y ~ simulator(theta)`.
    pub fn sample_joint(&self, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
        let theta = self.sample_prior(rng);
        let y = self.simulate(&theta, rng).expect("prior draws are in support");
        (theta, y)
    }

    /// `n` draws from the exact posterior p(theta | y_obs).
    pub fn reference_posterior(&self, y_obs: &[f64], n: usize, rng: &mut Rng) -> Result<Array2<f64>> {
        if y_obs.len() != self.d_y() {
            return Err(Error::Shape(format!("{} expects {} observations", self.name(), self.d_y())));
        }
        let dt = self.d_theta();
        let mut out = Array2::zeros((n, dt));
        match self {
            Task::TwoMoons => {
                let mut accepted = 0usize;
                let mut attempts = 0u64;
                while accepted < n {
                    attempts += 1;
                    if attempts > 1_000_000 && (accepted as f64) < 1e-6 * attempts as f64 {
                        return Err(Error::ObservationOutOfRange(format!(
                            "two_moons inversion acceptance below 1e-6 for y_obs {y_obs:?}"
                        )));
                    }
                    if let Some(theta) = two_moons_invert(y_obs, rng) {
                        out[[accepted, 0]] = theta[0];
                        out[[accepted, 1]] = theta[1];
                        accepted += 1;
                    }
                }
            }
            Task::GaussianLinear => {
                let (mean, var) = gaussian_linear_posterior(y_obs);
                for mut row in out.rows_mut() {
                    for (x, m) in row.iter_mut().zip(&mean) {
                        *x = m + var.sqrt() * rng.standard_normal();
                    }
                }
            }
            Task::GaussianLinearUniform => {
                let s = GL_VAR.sqrt();
                let rates: Vec<f64> = y_obs
                    .iter()
                    .map(|&y| normal_cdf((1.0 - y) / s) - normal_cdf((-1.0 - y) / s))
                    .collect();
                let acceptance: f64 = rates.iter().product();
                if !(acceptance >= 1e-8) {
                    return Err(Error::ObservationOutOfRange(format!(
                        "gaussian_linear_uniform rejection acceptance {acceptance:e} < 1e-8"
                    )));
                }
                // the truncated box factorizes, so each coordinate is rejected on its own
                for mut row in out.rows_mut() {
                    for (x, &y) in row.iter_mut().zip(y_obs) {
                        *x = loop {
                            let c = y + s * rng.standard_normal();
                            if (-1.0..=1.0).contains(&c) {
                                break c;
                            }
                        };
                    }
                }
            }
            Task::GaussianMixture => {
                // uniform prior + translation-invariant kernel: the posterior is the
                // simulator mixture centred at y_obs, restricted to the box
                let mut accepted = 0usize;
                let mut attempts = 0u64;
                while accepted < n {
                    attempts += 1;
                    if attempts > 1_000_000 && (accepted as f64) < 1e-6 * attempts as f64 {
                        return Err(Error::ObservationOutOfRange(format!(
                            "gaussian_mixture rejection acceptance below 1e-6 for y_obs {y_obs:?}"
                        )));
                    }
                    let std = if rng.uniform() < 0.5 { 1.0 } else { 0.1 };
                    let c0 = y_obs[0] + std * rng.standard_normal();
                    let c1 = y_obs[1] + std * rng.standard_normal();
                    if self.in_prior_support(&[c0, c1]) {
                        out[[accepted, 0]] = c0;
                        out[[accepted, 1]] = c1;
                        accepted += 1;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Deterministic part of the two-moons simulator for given angle `a` and radius `r`.
pub fn two_moons_map(theta: [f64; 2], a: f64, r: f64) -> [f64; 2] {
    let p = [r * a.cos() + 0.25, r * a.sin()];
    [
        p[0] - (theta[0] + theta[1]).abs() / SQRT_2,
        p[1] + (-theta[0] + theta[1]) / SQRT_2,
    ]
}

/// One attempt of the two-moons inversion sampler; `None` on rejection.
fn two_moons_invert(y: &[f64], rng: &mut Rng) -> Option<[f64; 2]> {
    let a = rng.uniform_in(-FRAC_PI_2, FRAC_PI_2);
    let r = 0.1 + 0.01 * rng.standard_normal();
    let p = [r * a.cos() + 0.25, r * a.sin()];
    let u = -SQRT_2 * (y[0] - p[0]);
    let v = SQRT_2 * (y[1] - p[1]);
    let s = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
    let theta = [(s * u - v) / 2.0, (s * u + v) / 2.0];
    (u >= 0.0 && theta.iter().all(|x| (-1.0..=1.0).contains(x))).then_some(theta)
}

/// Conjugate posterior for the Gaussian linear task: mean and per-coordinate variance.
pub fn gaussian_linear_posterior(y_obs: &[f64]) -> (Vec<f64>, f64) {
    // (S0^-1 + SL^-1)^-1 SL^-1 y with S0 = SL = 0.1 I
    let precision = 1.0 / GL_VAR + 1.0 / GL_VAR;
    let var = 1.0 / precision;
    (y_obs.iter().map(|y| var * y / GL_VAR).collect(), var)
}

/// `n` joint draws `[theta; y]` as rows. Chunks use independent sub-streams.
pub fn simulate_joint(task: Task, n: usize, rng: &Rng) -> Array2<f64> {
    let d = task.dim();
    let dt = task.d_theta();
    let ranges = exec::chunk_ranges(n, SIM_CHUNK);
    let chunks = exec::map_indexed(ranges.len(), |c| {
        let mut r = rng.substream(c as u64);
        let rows = ranges[c].len();
        let mut block = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            let (theta, y) = task.sample_joint(&mut r);
            block.extend_from_slice(&theta);
            block.extend_from_slice(&y);
        }
        debug_assert_eq!(block.len(), rows * d);
        block
    });
    let flat: Vec<f64> = chunks.into_iter().flatten().collect();
    let out = Array2::from_shape_vec((n, d), flat).expect("row layout");
    debug_assert!(out.rows().into_iter().all(|r| task.in_prior_support(&r.as_slice().unwrap()[..dt])));
    out
}

/// `k` held-out `(theta_true, y_obs)` pairs; pair `i` comes from sub-stream `i`.
pub fn observations(task: Task, k: usize, rng: &Rng) -> Vec<(Vec<f64>, Vec<f64>)> {
    (0..k).map(|i| task.sample_joint(&mut rng.substream(i as u64))).collect()
}

/// Additive N(0, sigma^2 I) observation noise.
pub fn corrupt(y: &[f64], sigma: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("noise level must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(y.to_vec());
    }
    Ok(y.iter().map(|&v| v + sigma * rng.standard_normal()).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AbcRule {
    /// Accept every simulation within Euclidean distance `eps` of `y_obs`.
    Epsilon(f64),
    /// Accept the `k` simulations closest to `y_obs`.
    Nearest(usize),
}

/// Plain ABC rejection over a pool of `pool` prior-predictive simulations.
pub fn abc_rejection(task: Task, y_obs: &[f64], pool: usize, rule: AbcRule, rng: &Rng) -> Result<Array2<f64>> {
    if y_obs.len() != task.d_y() {
        return Err(Error::Shape(format!("{} expects {} observations", task.name(), task.d_y())));
    }
    let dt = task.d_theta();
    let ranges = exec::chunk_ranges(pool, 1 << 16);
    let keep = match rule {
        AbcRule::Epsilon(e) if e > 0.0 => None,
        AbcRule::Nearest(k) if k > 0 => Some(k),
        other => return Err(invalid(format!("bad ABC rule {other:?}"))),
    };
    let eps = match rule {
        AbcRule::Epsilon(e) => e,
        AbcRule::Nearest(_) => f64::INFINITY,
    };
    let chunks = exec::map_indexed(ranges.len(), |c| {
        let mut r = rng.substream(c as u64);
        let mut hits: Vec<(f64, Vec<f64>)> = Vec::new();
        for _ in ranges[c].clone() {
            let (theta, y) = task.sample_joint(&mut r);
            let dist = y.iter().zip(y_obs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if dist <= eps {
                hits.push((dist, theta));
            }
            if let Some(k) = keep {
                if hits.len() >= 4 * k {
                    truncate_nearest(&mut hits, k);
                }
            }
        }
        if let Some(k) = keep {
            truncate_nearest(&mut hits, k);
        }
        hits
    });
    let mut hits: Vec<(f64, Vec<f64>)> = chunks.into_iter().flatten().collect();
    if let Some(k) = keep {
        truncate_nearest(&mut hits, k);
    }
    let n = hits.len();
    let flat: Vec<f64> = hits.into_iter().flat_map(|(_, t)| t).collect();
    Ok(Array2::from_shape_vec((n, dt), flat).expect("row layout"))
}

fn truncate_nearest(hits: &mut Vec<(f64, Vec<f64>)>, k: usize) {
    // stable sort keeps generation order among ties
    hits.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    hits.truncate(k);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_moons_forward_by_hand() {
        let y = two_moons_map([0.0, 0.0], 0.0, 0.1);
        assert!((y[0] - 0.35).abs() < 1e-15 && y[1] == 0.0);
    }

    #[test]
    fn two_moons_abs_symmetry() {
        // theta and its negated swap give |theta_1 + theta_2| unchanged
        let a = two_moons_map([0.3, 0.5], 0.2, 0.1);
        let b = two_moons_map([-0.5, -0.3], 0.2, 0.1);
        assert_eq!(a[0], b[0]);
    }

    #[test]
    fn two_moons_marginal_envelope() {
        let mut rng = Rng::new(1);
        let n = 100_000;
        let inside = (0..n)
            .filter(|_| {
                let (_, y) = Task::TwoMoons.sample_joint(&mut rng);
                (-1.2..=0.5).contains(&y[0])
            })
            .count();
        assert!(inside as f64 >= 0.99 * n as f64);
    }

    #[test]
    fn simulator_rejects_out_of_prior() {
        let mut rng = Rng::new(0);
        assert!(Task::TwoMoons.simulate(&[1.5, 0.0], &mut rng).is_err());
        assert!(Task::GaussianMixture.simulate(&[0.0], &mut rng).is_err());
    }

    #[test]
    fn simulators_are_deterministic() {
        for task in Task::ALL {
            let a = simulate_joint(task, 3000, &Rng::new(9));
            let b = simulate_joint(task, 3000, &Rng::new(9));
            assert_eq!(a, b, "{}", task.name());
        }
    }

    #[test]
    fn two_moons_reference_branches() {
        let mut rng = Rng::new(4);
        let n = 20_000;
        let post = Task::TwoMoons.reference_posterior(&[0.0, 0.0], n, &mut rng).unwrap();
        let upper = post.rows().into_iter().filter(|r| r[0] + r[1] > 0.0).count() as f64 / n as f64;
        assert!((upper - 0.5).abs() <= 0.02, "branch frequency {upper}");
        assert!(post.iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn two_moons_unreachable_observation() {
        let mut rng = Rng::new(4);
        let err = Task::TwoMoons.reference_posterior(&[5.0, 5.0], 10, &mut rng).unwrap_err();
        assert!(matches!(err, Error::ObservationOutOfRange(_)));
    }

    #[test]
    fn gaussian_linear_conjugate_formula() {
        let (mean, var) = gaussian_linear_posterior(&[1.0; 10]);
        assert!(mean.iter().all(|m| (m - 0.5).abs() < 1e-15));
        assert!((var - 0.05).abs() < 1e-15);
        let (mean, _) = gaussian_linear_posterior(&[0.0; 10]);
        assert!(mean.iter().all(|&m| m == 0.0));

        let mut rng = Rng::new(2);
        let post = Task::GaussianLinear.reference_posterior(&[1.0; 10], 50_000, &mut rng).unwrap();
        let m = crate::numerics::column_mean(post.view()).unwrap();
        let c = crate::numerics::covariance(post.view()).unwrap();
        for i in 0..10 {
            assert!((m[i] - 0.5).abs() < 4.0 * (0.05f64 / 50_000.0).sqrt());
            assert!((c[[i, i]] - 0.05).abs() < 0.002);
        }
    }

    /// Simpson's rule for the mean of N(mu, s^2) truncated to [-1, 1].
    fn truncated_mean_quadrature(mu: f64, s: f64) -> f64 {
        let n = 20_000;
        let h = 2.0 / n as f64;
        let pdf = |x: f64| (-(x - mu).powi(2) / (2.0 * s * s)).exp();
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..=n {
            let x = -1.0 + i as f64 * h;
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            num += w * x * pdf(x);
            den += w * pdf(x);
        }
        num / den
    }

    #[test]
    fn gaussian_linear_uniform_truncated_moments() {
        let y: Vec<f64> = (0..10).map(|i| -1.2 + 0.25 * i as f64).collect();
        let mut rng = Rng::new(3);
        let n = 40_000;
        let post = Task::GaussianLinearUniform.reference_posterior(&y, n, &mut rng).unwrap();
        assert!(post.iter().all(|x| (-1.0..=1.0).contains(x)));
        let m = crate::numerics::column_mean(post.view()).unwrap();
        for i in 0..10 {
            let want = truncated_mean_quadrature(y[i], 0.1f64.sqrt());
            // truncated sd is below the untruncated 0.316
            let se = 0.1f64.sqrt() / (n as f64).sqrt();
            assert!((m[i] - want).abs() < 3.0 * se, "dim {i}: {} vs {want}", m[i]);
        }
        let center = Task::GaussianLinearUniform.reference_posterior(&[0.0; 10], 1000, &mut rng).unwrap();
        assert!(center.iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn gaussian_linear_uniform_far_observation_errors() {
        let mut rng = Rng::new(3);
        let err = Task::GaussianLinearUniform.reference_posterior(&[10.0; 10], 10, &mut rng).unwrap_err();
        assert!(matches!(err, Error::ObservationOutOfRange(_)));
    }

    #[test]
    fn gaussian_mixture_two_scales() {
        let mut rng = Rng::new(6);
        let n = 40_000;
        let post = Task::GaussianMixture.reference_posterior(&[0.0, 0.0], n, &mut rng).unwrap();
        let near = post.rows().into_iter().filter(|r| r[0].hypot(r[1]) < 0.3).count() as f64 / n as f64;
        // Rayleigh radii: P(r < 0.3) = 1 - exp(-0.3^2 / (2 s^2)) per component
        let want = 0.5 * (1.0 - (-4.5f64).exp()) + 0.5 * (1.0 - (-0.045f64).exp());
        assert!((near - want).abs() < 3.0 * (want * (1.0 - want) / n as f64).sqrt(), "{near} vs {want}");
        let edge = Task::GaussianMixture.reference_posterior(&[9.5, -9.8], 2000, &mut rng).unwrap();
        assert!(edge.iter().all(|x| (-10.0..=10.0).contains(x)));
    }

    #[test]
    fn gaussian_mixture_responsibilities() {
        // at zero distance the density ratio of N(0; 0, 0.01 I) to N(0; 0, I) in 2-d is 100
        let dens = |var: f64| 1.0 / (2.0 * std::f64::consts::PI * var);
        let narrow = 0.5 * dens(0.01) / (0.5 * dens(0.01) + 0.5 * dens(1.0));
        assert!((narrow - 100.0 / 101.0).abs() < 1e-12);
    }

    #[test]
    fn corrupt_noise() {
        let mut rng = Rng::new(1);
        let y = vec![0.3, -1.2, 4.0];
        assert_eq!(corrupt(&y, 0.0, &mut rng).unwrap(), y);
        assert!(corrupt(&y, -0.1, &mut rng).is_err());
        let n = 100_000;
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let c = corrupt(&y, 0.5, &mut rng).unwrap();
            for j in 0..3 {
                sq[j] += (c[j] - y[j]).powi(2);
            }
        }
        for s in sq {
            let var = s / n as f64;
            assert!((var - 0.25).abs() < 3.0 * 0.25 * (2.0 / n as f64).sqrt(), "var {var}");
        }
    }

    #[test]
    fn abc_rules() {
        let y = [0.0, 0.0];
        let near = abc_rejection(Task::TwoMoons, &y, 100_000, AbcRule::Nearest(50), &Rng::new(1)).unwrap();
        assert_eq!(near.nrows(), 50);
        let eps = abc_rejection(Task::TwoMoons, &y, 100_000, AbcRule::Epsilon(0.05), &Rng::new(1)).unwrap();
        assert!(eps.nrows() > 0);
        assert!(abc_rejection(Task::TwoMoons, &y, 10, AbcRule::Epsilon(0.0), &Rng::new(1)).is_err());
    }

    #[test]
    fn names_roundtrip() {
        for t in Task::ALL {
            assert_eq!(Task::parse(t.name()).unwrap(), t);
        }
        assert!(Task::parse("slcp").is_err());
        assert_eq!(Task::TwoMoons.coordinate_names(), vec!["theta_1", "theta_2", "y_1", "y_2"]);
    }
}
