//! Seeded random streams and the elementary distributions used everywhere else.
//!
//! The generator is ChaCha8. A `(seed, stream)` pair addresses an independent
//! ChaCha stream; streams never overlap (each has 2^64 blocks of its own), which
//! is what lets workers draw in parallel without coordinating.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{invalid, Result};

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
    seed: u64,
    stream: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner, seed, stream }
    }

    /// Independent child stream keyed by `id`. Does not advance `self`.
    pub fn substream(&self, id: u64) -> Rng {
        let stream = splitmix64(self.stream ^ splitmix64(id.wrapping_add(0x5851_F42D_4C95_7F2D)));
        Rng::with_stream(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform on [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform index in 0..n.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

pub fn normal(rng: &mut Rng, mean: f64, std: f64) -> Result<f64> {
    if !std.is_finite() || std < 0.0 {
        return Err(invalid(format!("normal std must be finite and >= 0, got {std}")));
    }
    Ok(mean + std * rng.standard_normal())
}

pub fn beta(rng: &mut Rng, a: f64, b: f64) -> Result<f64> {
    let dist = BetaSampler::new(a, b)?;
    Ok(dist.sample(rng))
}

pub fn bernoulli(rng: &mut Rng, p: f64) -> Result<bool> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("bernoulli p must lie in [0,1], got {p}")));
    }
    Ok(rng.uniform() < p)
}

/// Pre-validated Beta(a, b) for hot loops.
#[derive(Clone, Copy, Debug)]
pub struct BetaSampler {
    dist: Beta<f64>,
}

impl BetaSampler {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(invalid(format!("beta shapes must be positive, got ({a}, {b})")));
        }
        let dist = Beta::new(a, b).map_err(|e| invalid(format!("beta({a}, {b}): {e}")))?;
        Ok(Self { dist })
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        self.dist.sample(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::new(8);
        assert_ne!(Rng::new(7).next_u64(), c.next_u64());
    }

    #[test]
    fn substreams_differ_and_are_stable() {
        let root = Rng::new(3);
        let mut s1 = root.substream(1);
        let mut s2 = root.substream(2);
        let mut s1b = root.substream(1);
        let x = s1.next_u64();
        assert_ne!(x, s2.next_u64());
        assert_eq!(x, s1b.next_u64());
    }

    #[test]
    fn zero_variance_normal_is_exact() {
        let mut rng = Rng::new(11);
        for _ in 0..100 {
            assert_eq!(normal(&mut rng, 0.0, 0.0).unwrap(), 0.0);
        }
        assert!(normal(&mut rng, 0.0, -1.0).is_err());
        assert!(normal(&mut rng, 0.0, f64::NAN).is_err());
    }

    #[test]
    fn normal_moments() {
        let mut rng = Rng::new(42);
        let xs: Vec<f64> = (0..1_000_000).map(|_| normal(&mut rng, 0.0, 1.0).unwrap()).collect();
        let (m, v) = moments(&xs);
        assert!(m.abs() <= 0.005, "mean {m}");
        assert!((0.99..=1.01).contains(&v), "var {v}");
    }

    #[test]
    fn beta_half_half_moments() {
        let mut rng = Rng::new(5);
        let xs: Vec<f64> = (0..1_000_000).map(|_| beta(&mut rng, 0.5, 0.5).unwrap()).collect();
        let (m, v) = moments(&xs);
        assert!((0.497..=0.503).contains(&m), "mean {m}");
        assert!((0.123..=0.127).contains(&v), "var {v}");
        assert!(xs.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn beta_one_one_is_uniform() {
        let mut rng = Rng::new(9);
        let mut xs: Vec<f64> = (0..100_000).map(|_| beta(&mut rng, 1.0, 1.0).unwrap()).collect();
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| ((i + 1) as f64 / n - x).abs().max((x - i as f64 / n).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "ks {ks}");
    }

    #[test]
    fn beta_rejects_bad_shapes() {
        let mut rng = Rng::new(1);
        assert!(beta(&mut rng, 0.0, 1.0).is_err());
        assert!(beta(&mut rng, 1.0, -2.0).is_err());
    }

    #[test]
    fn bernoulli_edges_and_rate() {
        let mut rng = Rng::new(2);
        assert!((0..1000).all(|_| !bernoulli(&mut rng, 0.0).unwrap()));
        assert!((0..1000).all(|_| bernoulli(&mut rng, 1.0).unwrap()));
        let hits = (0..1_000_000).filter(|_| bernoulli(&mut rng, 0.3).unwrap()).count();
        let rate = hits as f64 / 1e6;
        assert!((0.2986..=0.3014).contains(&rate), "rate {rate}");
        assert!(bernoulli(&mut rng, 1.5).is_err());
        assert!(bernoulli(&mut rng, -0.1).is_err());
    }
}
