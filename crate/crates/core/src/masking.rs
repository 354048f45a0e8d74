//! Binary masks over the joint state `z = [theta; y]`.
//!
//! Convention used everywhere: `1` marks an observed (clamped) coordinate,
//! `0` a generated one.

use std::fmt;

use crate::error::{invalid, Error, Result};
use crate::numerics::{BetaSampler, Rng};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    bits: Vec<bool>,
    d_theta: usize,
    d_y: usize,
}

impl Mask {
    pub fn new(bits: Vec<bool>, d_theta: usize, d_y: usize) -> Result<Self> {
        if d_theta == 0 || d_y == 0 {
            return Err(invalid("mask blocks must both be non-empty"));
        }
        if bits.len() != d_theta + d_y {
            return Err(Error::Shape(format!(
                "mask has {} bits, expected {}",
                bits.len(),
                d_theta + d_y
            )));
        }
        Ok(Self { bits, d_theta, d_y })
    }

    /// Parse a `0`/`1` string such as `"0011"`.
    pub fn parse(s: &str, d_theta: usize, d_y: usize) -> Result<Self> {
        let bits = s
            .trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::InvalidQuery(format!("mask character {other:?} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(bits, d_theta, d_y)
    }

    pub fn filled(value: bool, d_theta: usize, d_y: usize) -> Result<Self> {
        Self::new(vec![value; d_theta + d_y], d_theta, d_y)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn d_theta(&self) -> usize {
        self.d_theta
    }

    pub fn d_y(&self) -> usize {
        self.d_y
    }

    pub fn is_observed(&self, i: usize) -> bool {
        self.bits[i]
    }

    /// Number of generated coordinates, `|m^c|`.
    pub fn complement_count(&self) -> usize {
        self.bits.iter().filter(|b| !**b).count()
    }

    pub fn complement(&self) -> Mask {
        Mask {
            bits: self.bits.iter().map(|b| !b).collect(),
            ..*self
        }
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.bits[i]).collect()
    }

    pub fn generated_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.bits[i]).collect()
    }

    /// 0.0 / 1.0 encoding, as consumed by the vector field.
    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

impl fmt::Display for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Query families with a fixed block mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum QueryKind {
    /// p(theta | y)
    Posterior,
    /// p(y | theta)
    Likelihood,
    /// p(theta, y); prior and data-marginal queries discard one block of this.
    Joint,
    /// p(z_A | z_B); coordinates outside A and B are generated and discarded.
    Mixed { generated: Vec<usize>, conditioned: Vec<usize> },
}

pub fn canonical_mask(query: &QueryKind, d_theta: usize, d_y: usize) -> Result<Mask> {
    let d = d_theta + d_y;
    let bits = match query {
        QueryKind::Posterior => (0..d).map(|i| i >= d_theta).collect(),
        QueryKind::Likelihood => (0..d).map(|i| i < d_theta).collect(),
        QueryKind::Joint => vec![false; d],
        QueryKind::Mixed { generated, conditioned } => {
            let mut bits = vec![false; d];
            for &i in generated.iter().chain(conditioned) {
                if i >= d {
                    return Err(Error::InvalidQuery(format!("coordinate {i} out of range for d={d}")));
                }
            }
            if let Some(i) = generated.iter().find(|i| conditioned.contains(i)) {
                return Err(Error::InvalidQuery(format!(
                    "coordinate {i} is both generated and conditioned"
                )));
            }
            for &i in conditioned {
                bits[i] = true;
            }
            bits
        }
    };
    Mask::new(bits, d_theta, d_y)
}

/// Training-time mask distribution: a posterior/likelihood/partial mixture.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskMixtureConfig {
    /// Probability of the posterior mask.
    pub alpha: f64,
    /// Probability of the likelihood mask.
    pub beta: f64,
    /// Beta hyperprior over the per-block observation rates.
    pub beta_shape: (f64, f64),
}

impl Default for MaskMixtureConfig {
    fn default() -> Self {
        Self { alpha: 0.15, beta: 0.15, beta_shape: (0.5, 0.5) }
    }
}

impl MaskMixtureConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(self.alpha) || !ok(self.beta) || self.alpha + self.beta > 1.0 {
            return Err(invalid(format!(
                "mask mixture weights need alpha, beta >= 0 and alpha + beta <= 1 (got {}, {})",
                self.alpha, self.beta
            )));
        }
        BetaSampler::new(self.beta_shape.0, self.beta_shape.1).map(|_| ())
    }
}

/// Draws masks from the mixture. Keeps the validated Beta sampler around.
#[derive(Clone, Debug)]
pub struct MaskSampler {
    cfg: MaskMixtureConfig,
    rates: BetaSampler,
    d_theta: usize,
    d_y: usize,
}

impl MaskSampler {
    pub fn new(cfg: MaskMixtureConfig, d_theta: usize, d_y: usize) -> Result<Self> {
        cfg.validate()?;
        if d_theta == 0 || d_y == 0 {
            return Err(invalid("mask blocks must both be non-empty"));
        }
        Ok(Self {
            rates: BetaSampler::new(cfg.beta_shape.0, cfg.beta_shape.1)?,
            cfg,
            d_theta,
            d_y,
        })
    }

    pub fn sample(&self, rng: &mut Rng) -> Mask {
        let (dt, dy) = (self.d_theta, self.d_y);
        let u = rng.uniform();
        let bits = if u < self.cfg.alpha {
            (0..dt + dy).map(|i| i >= dt).collect()
        } else if u < self.cfg.alpha + self.cfg.beta {
            (0..dt + dy).map(|i| i < dt).collect()
        } else {
            // all-ones leaves nothing to generate; redraw the whole partial branch
            loop {
                let pi_theta = self.rates.sample(rng);
                let pi_y = self.rates.sample(rng);
                let bits: Vec<bool> = (0..dt + dy)
                    .map(|i| rng.uniform() < if i < dt { pi_theta } else { pi_y })
                    .collect();
                if bits.iter().any(|b| !b) {
                    break bits;
                }
            }
        };
        Mask { bits, d_theta: dt, d_y: dy }
    }
}

pub fn sample_mask(rng: &mut Rng, cfg: &MaskMixtureConfig, d_theta: usize, d_y: usize) -> Result<Mask> {
    Ok(MaskSampler::new(*cfg, d_theta, d_y)?.sample(rng))
}

pub fn complement_count(m: &Mask) -> usize {
    m.complement_count()
}
