//! Time-conditioned residual MLP with adaptive LayerNorm.
//!
//! `v(z_t, m, t)`: `[z_t; m]` is projected to the hidden width, passed through
//! `blocks` residual blocks
//!
//! ```text
//! h <- h + MLP((1 + gamma(t)) * LN(h) + beta(t))
//! ```
//!
//! and projected back to the joint dimension. `(gamma, beta)` come from a
//! per-block linear head on a sinusoidal embedding of `t`. The heads and the
//! output projection start at zero, so a fresh network is the zero field.
//!
//! All weights live in one flat `Vec<f64>` described by a [`Layout`]; the
//! optimizer, EMA and checkpoint code work on that flat buffer directly.

mod net;

pub use net::Trace;

use crate::error::{invalid, Result};
use crate::numerics::Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NetConfig {
    /// Joint dimension `d_theta + d_y`.
    pub d: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub time_embed_dim: usize,
    pub ff_mult: usize,
}

impl NetConfig {
    pub fn new(d: usize, hidden: usize, blocks: usize) -> Self {
        Self { d, hidden, blocks, time_embed_dim: 128, ff_mult: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.hidden == 0 || self.blocks == 0 || self.ff_mult == 0 {
            return Err(invalid(format!("network sizes must be >= 1: {self:?}")));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(invalid(format!(
                "time_embed_dim must be even and >= 2, got {}",
                self.time_embed_dim
            )));
        }
        Ok(())
    }

    pub fn ff_width(&self) -> usize {
        self.ff_mult * self.hidden
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct BlockLayout {
    pub ln_gain: usize,
    pub ln_bias: usize,
    pub ada_w: usize,
    pub ada_b: usize,
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
}

/// Offsets of every tensor inside the flat parameter buffer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub(crate) in_w: usize,
    pub(crate) in_b: usize,
    pub(crate) blocks: Vec<BlockLayout>,
    pub(crate) out_w: usize,
    pub(crate) out_b: usize,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

impl Layout {
    pub fn new(cfg: &NetConfig) -> Self {
        let (d, h, e, f) = (cfg.d, cfg.hidden, cfg.time_embed_dim, cfg.ff_width());
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let in_w = take(2 * d * h);
        let in_b = take(h);
        let blocks = (0..cfg.blocks)
            .map(|_| BlockLayout {
                ln_gain: take(h),
                ln_bias: take(h),
                ada_w: take(e * 2 * h),
                ada_b: take(2 * h),
                fc1_w: take(h * f),
                fc1_b: take(f),
                fc2_w: take(f * h),
                fc2_b: take(h),
            })
            .collect();
        let out_w = take(h * d);
        let out_b = take(d);
        Self { in_w, in_b, blocks, out_w, out_b, len: off }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Named tensors in storage order. Weights are stored `(fan_in, fan_out)`.
    pub fn manifest(&self, cfg: &NetConfig) -> Vec<TensorSpec> {
        let (d, h, e, f) = (cfg.d, cfg.hidden, cfg.time_embed_dim, cfg.ff_width());
        let spec = |name: String, shape: Vec<usize>, offset: usize| TensorSpec { name, shape, offset };
        let mut out = vec![
            spec("input.weight".into(), vec![2 * d, h], self.in_w),
            spec("input.bias".into(), vec![h], self.in_b),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.extend([
                spec(format!("block{l}.norm.gain"), vec![h], b.ln_gain),
                spec(format!("block{l}.norm.bias"), vec![h], b.ln_bias),
                spec(format!("block{l}.adaln.weight"), vec![e, 2 * h], b.ada_w),
                spec(format!("block{l}.adaln.bias"), vec![2 * h], b.ada_b),
                spec(format!("block{l}.fc1.weight"), vec![h, f], b.fc1_w),
                spec(format!("block{l}.fc1.bias"), vec![f], b.fc1_b),
                spec(format!("block{l}.fc2.weight"), vec![f, h], b.fc2_w),
                spec(format!("block{l}.fc2.bias"), vec![h], b.fc2_b),
            ]);
        }
        out.push(spec("output.weight".into(), vec![h, d], self.out_w));
        out.push(spec("output.bias".into(), vec![d], self.out_b));
        out
    }
}

/// Network weights plus the shape they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorFieldParams {
    cfg: NetConfig,
    layout: Layout,
    values: Vec<f64>,
}

impl VectorFieldParams {
    /// Standard initialization: fan-in uniform for the input projection and MLP
    /// layers, unit LayerNorm gain, and exact zeros for the AdaLN heads and the
    /// output projection.
    pub fn init(cfg: NetConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut values = vec![0.0; layout.len()];
        let (d, h, f) = (cfg.d, cfg.hidden, cfg.ff_width());
        let mut fill = |off: usize, n: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut values[off..off + n] {
                *v = rng.uniform_in(-bound, bound);
            }
        };
        fill(layout.in_w, 2 * d * h, 2 * d);
        fill(layout.in_b, h, 2 * d);
        for b in &layout.blocks {
            fill(b.fc1_w, h * f, h);
            fill(b.fc1_b, f, h);
            fill(b.fc2_w, f * h, f);
            fill(b.fc2_b, h, f);
        }
        for b in &layout.blocks {
            values[b.ln_gain..b.ln_gain + h].fill(1.0);
        }
        Ok(Self { cfg, layout, values })
    }

    pub fn zeros(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let values = vec![0.0; layout.len()];
        Ok(Self { cfg, layout, values })
    }

    pub fn from_values(cfg: NetConfig, values: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        if values.len() != layout.len() {
            return Err(crate::Error::Shape(format!(
                "expected {} parameters, got {}",
                layout.len(),
                values.len()
            )));
        }
        Ok(Self { cfg, layout, values })
    }

    /// Overwrite every tensor, including the zero-initialized ones, with
    /// fan-in-scaled uniform noise. Used to probe a non-trivial network.
    pub fn randomize(&mut self, rng: &mut Rng, scale: f64) {
        for spec in self.layout.manifest(&self.cfg) {
            let fan_in = if spec.shape.len() == 2 { spec.shape[0] } else { self.cfg.hidden };
            let bound = scale / (fan_in as f64).sqrt();
            for v in &mut self.values[spec.offset..spec.offset + spec.numel()] {
                *v = rng.uniform_in(-bound, bound);
            }
        }
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn manifest(&self) -> Vec<TensorSpec> {
        self.layout.manifest(&self.cfg)
    }

    /// Slice of a named tensor, mostly for inspection and tests.
    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.manifest()
            .into_iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.offset..s.offset + s.numel()])
    }
}

/// Sinusoidal embedding of `t`: entries `2k, 2k+1` are `sin(t w_k), cos(t w_k)`
/// with `w_k = 10000^(-2k/dim)`. No rescaling of `t` is applied.
pub fn time_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(invalid(format!("embedding dim must be even and >= 2, got {dim}")));
    }
    let mut out = vec![0.0; dim];
    embed_into(t, &mut out);
    Ok(out)
}

pub(crate) fn embed_into(t: f64, out: &mut [f64]) {
    let dim = out.len();
    for k in 0..dim / 2 {
        let w = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        let (s, c) = (t * w).sin_cos();
        out[2 * k] = s;
        out[2 * k + 1] = c;
    }
}
