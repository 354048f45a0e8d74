//! Versioned binary checkpoints.
//!
//! Layout: the 4-byte magic `OFSB`, a little-endian `u32` format version, a
//! little-endian `u64` header length, a UTF-8 header of `key=value` lines and
//! `tensor name shape offset` manifest lines, then the payload as little-endian
//! `f64`. Every float lives in the payload so a load/save round trip is exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::tasks::Task;
use crate::trainer::Standardizer;
use crate::vfnet::{NetConfig, VectorFieldParams};

pub const MAGIC: &[u8; 4] = b"OFSB";
pub const FORMAT_VERSION: u32 = 1;

/// Optimizer state needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct ResumeState {
    pub adam: AdamState,
    /// EMA weights at the last step (the checkpoint's `ema` holds the best ones).
    pub ema_last: Vec<f64>,
    pub bad_validations: usize,
    pub stopped: bool,
    /// Running training-loss sum and count since the last log row.
    pub loss_acc: (f64, u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub task: Task,
    pub net: NetConfig,
    pub standardizer: Standardizer,
    pub raw: Vec<f64>,
    /// EMA weights from the best validation pass; used for all sampling.
    pub ema: Vec<f64>,
    pub config_hash: String,
    /// Simulation budget and seed of the run that produced the weights.
    pub budget: usize,
    pub seed: u64,
    pub best_val_loss: f64,
    pub best_step: u64,
    pub iterations: u64,
    pub resume: Option<ResumeState>,
}

impl Checkpoint {
    pub fn d_theta(&self) -> usize {
        self.task.d_theta()
    }

    pub fn d_y(&self) -> usize {
        self.task.d_y()
    }

    pub fn ema_field(&self) -> Result<VectorFieldParams> {
        VectorFieldParams::from_values(self.net, self.ema.clone())
    }

    pub fn raw_field(&self) -> Result<VectorFieldParams> {
        VectorFieldParams::from_values(self.net, self.raw.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = BTreeMap::new();
        header.insert("task", self.task.name().to_string());
        header.insert("d_theta", self.d_theta().to_string());
        header.insert("d_y", self.d_y().to_string());
        header.insert("net.d", self.net.d.to_string());
        header.insert("net.hidden", self.net.hidden.to_string());
        header.insert("net.blocks", self.net.blocks.to_string());
        header.insert("net.time_embed_dim", self.net.time_embed_dim.to_string());
        header.insert("net.ff_mult", self.net.ff_mult.to_string());
        header.insert("config_hash", self.config_hash.clone());
        header.insert("budget", self.budget.to_string());
        header.insert("seed", self.seed.to_string());
        header.insert("best_step", self.best_step.to_string());
        header.insert("iterations", self.iterations.to_string());

        let mut payload: Vec<f64> = Vec::new();
        let mut manifest = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &[f64]| {
            debug_assert_eq!(shape.iter().product::<usize>(), data.len());
            manifest.push((name, shape, payload.len()));
            payload.extend_from_slice(data);
        };
        let d = self.net.d;
        push("standardizer.mean".into(), vec![d], &self.standardizer.mean);
        push("standardizer.std".into(), vec![d], &self.standardizer.std);
        push("best_val_loss".into(), vec![1], &[self.best_val_loss]);
        let tensors = VectorFieldParams::from_values(self.net, self.raw.clone())?.manifest();
        let mut push_net = |prefix: &str, values: &[f64]| {
            for t in &tensors {
                push(format!("{prefix}.{}", t.name), t.shape.clone(), &values[t.offset..t.offset + t.numel()]);
            }
        };
        push_net("raw", &self.raw);
        push_net("ema", &self.ema);
        if let Some(r) = &self.resume {
            header.insert("resume.adam_step", r.adam.step.to_string());
            header.insert("resume.bad_validations", r.bad_validations.to_string());
            header.insert("resume.stopped", u8::from(r.stopped).to_string());
            header.insert("resume.loss_count", r.loss_acc.1.to_string());
            push_net("resume.ema_last", &r.ema_last);
            push_net("resume.adam_m", &r.adam.m);
            push_net("resume.adam_v", &r.adam.v);
            push("resume.loss_sum".into(), vec![1], &[r.loss_acc.0]);
        }

        let mut text = String::new();
        for (k, v) in &header {
            text.push_str(&format!("{k}={v}\n"));
        }
        for (name, shape, offset) in &manifest {
            let shape: Vec<String> = shape.iter().map(|s| s.to_string()).collect();
            text.push_str(&format!("tensor {name} {} {offset}\n", shape.join("x")));
        }
        let mut out = Vec::with_capacity(16 + text.len() + 8 * payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing OFSB magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let text = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated header"))
            .and_then(|h| std::str::from_utf8(h).map_err(|_| bad("header is not UTF-8")))?;
        let body = &bytes[16 + hlen..];
        if body.len() % 8 != 0 {
            return Err(bad("payload length is not a multiple of 8"));
        }
        let payload: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();

        let mut header = BTreeMap::new();
        let mut tensors = BTreeMap::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                let [name, shape, offset] = parts[..] else {
                    return Err(Error::Checkpoint(format!("bad manifest line {line:?}")));
                };
                let numel = shape
                    .split('x')
                    .map(|s| s.parse::<usize>())
                    .product::<std::result::Result<usize, _>>()
                    .map_err(|_| Error::Checkpoint(format!("bad shape in {line:?}")))?;
                let offset: usize = offset.parse().map_err(|_| Error::Checkpoint(format!("bad offset in {line:?}")))?;
                let data = payload
                    .get(offset..offset + numel)
                    .ok_or_else(|| Error::Checkpoint(format!("tensor {name} runs past the payload")))?;
                tensors.insert(name.to_string(), data.to_vec());
            } else if let Some((k, v)) = line.split_once('=') {
                header.insert(k.to_string(), v.to_string());
            } else {
                return Err(Error::Checkpoint(format!("bad header line {line:?}")));
            }
        }
        let get = |k: &str| header.get(k).ok_or_else(|| Error::Checkpoint(format!("header key {k} missing")));
        let num = |k: &str| -> Result<u64> {
            get(k)?.parse().map_err(|_| Error::Checkpoint(format!("header key {k} is not an integer")))
        };
        let task = Task::parse(get("task")?)?;
        let net = NetConfig {
            d: num("net.d")? as usize,
            hidden: num("net.hidden")? as usize,
            blocks: num("net.blocks")? as usize,
            time_embed_dim: num("net.time_embed_dim")? as usize,
            ff_mult: num("net.ff_mult")? as usize,
        };
        net.validate()?;
        if net.d != task.dim() || num("d_theta")? as usize != task.d_theta() {
            return Err(bad("network width does not match the task dimensions"));
        }
        let mut take = |name: &str| tensors.remove(name).ok_or_else(|| Error::Checkpoint(format!("tensor {name} missing")));
        let standardizer = Standardizer { mean: take("standardizer.mean")?, std: take("standardizer.std")? };
        let best_val_loss = take("best_val_loss")?[0];
        let specs = VectorFieldParams::zeros(net)?.manifest();
        let mut take_net = |prefix: &str| -> Result<Vec<f64>> {
            let mut values = vec![0.0; specs.iter().map(|s| s.numel()).sum()];
            for s in &specs {
                let data = take(&format!("{prefix}.{}", s.name))?;
                if data.len() != s.numel() {
                    return Err(Error::Checkpoint(format!("tensor {prefix}.{} has the wrong size", s.name)));
                }
                values[s.offset..s.offset + s.numel()].copy_from_slice(&data);
            }
            Ok(values)
        };
        let raw = take_net("raw")?;
        let ema = take_net("ema")?;
        let resume = if header.contains_key("resume.adam_step") {
            Some(ResumeState {
                adam: AdamState { m: take_net("resume.adam_m")?, v: take_net("resume.adam_v")?, step: num("resume.adam_step")? },
                ema_last: take_net("resume.ema_last")?,
                bad_validations: num("resume.bad_validations")? as usize,
                stopped: num("resume.stopped")? != 0,
                loss_acc: (take("resume.loss_sum")?[0], num("resume.loss_count")?),
            })
        } else {
            None
        };
        Ok(Self {
            task,
            net,
            standardizer,
            raw,
            ema,
            config_hash: get("config_hash")?.clone(),
            budget: num("budget")? as usize,
            seed: num("seed")?,
            best_val_loss,
            best_step: num("best_step")?,
            iterations: num("iterations")?,
            resume,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn sample_checkpoint(with_resume: bool) -> Checkpoint {
        let task = Task::TwoMoons;
        let net = NetConfig { d: 4, hidden: 6, blocks: 2, time_embed_dim: 4, ff_mult: 2 };
        let mut rng = Rng::new(1);
        let mut p = VectorFieldParams::init(net, &mut rng).unwrap();
        p.randomize(&mut rng, 1.0);
        let raw = p.values().to_vec();
        let ema: Vec<f64> = raw.iter().map(|x| x * 0.5 + 1e-17).collect();
        let resume = with_resume.then(|| ResumeState {
            adam: AdamState { m: raw.clone(), v: ema.clone(), step: 17 },
            ema_last: raw.iter().map(|x| -x).collect(),
            bad_validations: 3,
            stopped: false,
            loss_acc: (0.1 + 0.2, 2),
        });
        Checkpoint {
            task,
            net,
            standardizer: Standardizer { mean: vec![0.1, -0.2, 1.0 / 3.0, 7.0], std: vec![1e-8, 2.0, 0.3, f64::MIN_POSITIVE] },
            raw,
            ema,
            config_hash: "abc123".into(),
            budget: 300,
            seed: u64::MAX,
            best_val_loss: 0.123456789012345,
            best_step: 500,
            iterations: 1000,
            resume,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        for with_resume in [false, true] {
            let c = sample_checkpoint(with_resume);
            let bytes = c.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_bytes().unwrap(), bytes);
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&back.ema), bits(&c.ema));
        }
    }

    #[test]
    fn version_mismatch_is_refused() {
        let mut bytes = sample_checkpoint(false).to_bytes().unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
        let mut bytes = sample_checkpoint(false).to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn truncated_payload_is_refused() {
        let bytes = sample_checkpoint(true).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
