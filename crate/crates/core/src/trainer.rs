//! Training loop: data split, standardization, Adam with clipping, EMA,
//! warmup + cosine schedule and early stopping on the EMA validation loss.

use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, ResumeState};
use crate::error::{invalid, Error, Result};
use crate::flowcore::{self, LossConfig, PathBatch, TimeSampler, TimeSchedule};
use crate::masking::{MaskMixtureConfig, MaskSampler};
use crate::numerics::Rng;
use crate::optim::{adam_step, clip_global_norm, ema_update, AdamConfig, AdamState, LrSchedule};
use crate::tasks::{simulate_joint, Task};
use crate::vfnet::{NetConfig, VectorFieldParams};

pub const STD_FLOOR: f64 = 1e-8;

// Rng streams, one per independent consumer of the run seed.
const STREAM_DATA: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_STEPS: u64 = 4;
const STREAM_VAL: u64 = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    /// Number of simulated (theta, y) pairs.
    pub budget: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub time_embed_dim: usize,
    pub ff_mult: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_iters: u64,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub ema_decay: f64,
    pub val_every: u64,
    pub patience: usize,
    pub time_schedule: TimeSchedule,
    pub mask: MaskMixtureConfig,
    /// Weight on the parameter block; `None` means `d_y / d_theta`.
    pub lambda_theta: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    /// Per-task defaults for architecture and optimizer.
    pub fn for_task(task: Task, budget: usize, seed: u64) -> Self {
        let row = task.defaults();
        Self {
            task,
            budget,
            hidden: row.hidden,
            blocks: row.blocks,
            time_embed_dim: 128,
            ff_mult: 2,
            batch_size: row.batch_size,
            peak_lr: row.peak_lr,
            warmup_steps: row.warmup_steps,
            total_iters: 100_000,
            adam: AdamConfig::default(),
            clip_norm: 1.0,
            ema_decay: 0.999,
            val_every: 500,
            patience: 20,
            time_schedule: row.time_schedule,
            mask: MaskMixtureConfig::default(),
            lambda_theta: None,
            seed,
        }
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            d: self.task.dim(),
            hidden: self.hidden,
            blocks: self.blocks,
            time_embed_dim: self.time_embed_dim,
            ff_mult: self.ff_mult,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        let mut cfg = LossConfig::for_dims(self.task.d_theta(), self.task.d_y());
        if let Some(l) = self.lambda_theta {
            cfg.lambda_theta = l;
        }
        cfg.time_schedule = self.time_schedule;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(invalid("training budget must be at least 1 simulation"));
        }
        if split_sizes(self.budget).0 < 2 {
            return Err(invalid(format!("budget {} leaves fewer than 2 training rows", self.budget)));
        }
        let positive = |name: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(invalid(format!("{name} must be positive and finite, got {x}")))
            }
        };
        positive("peak_lr", self.peak_lr)?;
        positive("clip_norm", self.clip_norm)?;
        positive("adam.eps", self.adam.eps)?;
        for (name, b) in [("adam.beta1", self.adam.beta1), ("adam.beta2", self.adam.beta2), ("ema_decay", self.ema_decay)] {
            if !(0.0..=1.0).contains(&b) {
                return Err(invalid(format!("{name} must lie in [0, 1], got {b}")));
            }
        }
        if let Some(l) = self.lambda_theta {
            positive("lambda_theta", l)?;
        }
        if self.batch_size == 0 || self.val_every == 0 || self.patience == 0 {
            return Err(invalid("batch_size, val_every and patience must be >= 1"));
        }
        LrSchedule::new(self.peak_lr, self.warmup_steps, self.total_iters)?;
        self.mask.validate()?;
        self.net_config().validate()
    }

    /// Stable `key=value` rendering; the hash of this text identifies the run.
    pub fn canonical_text(&self) -> String {
        let lambda = self.lambda_theta.map_or("auto".to_string(), |l| format!("{l:?}"));
        [
            format!("task={}", self.task.name()),
            format!("budget={}", self.budget),
            format!("hidden={}", self.hidden),
            format!("blocks={}", self.blocks),
            format!("time_embed_dim={}", self.time_embed_dim),
            format!("ff_mult={}", self.ff_mult),
            format!("batch_size={}", self.batch_size),
            format!("peak_lr={:?}", self.peak_lr),
            format!("warmup_steps={}", self.warmup_steps),
            format!("total_iters={}", self.total_iters),
            format!("adam_beta1={:?}", self.adam.beta1),
            format!("adam_beta2={:?}", self.adam.beta2),
            format!("adam_eps={:?}", self.adam.eps),
            format!("clip_norm={:?}", self.clip_norm),
            format!("ema_decay={:?}", self.ema_decay),
            format!("val_every={}", self.val_every),
            format!("patience={}", self.patience),
            format!("time_schedule={}", self.time_schedule.name()),
            format!("mask_alpha={:?}", self.mask.alpha),
            format!("mask_beta={:?}", self.mask.beta),
            format!("mask_beta_shape={:?},{:?}", self.mask.beta_shape.0, self.mask.beta_shape.1),
            format!("lambda_theta={lambda}"),
            format!("seed={}", self.seed),
        ]
        .join("\n")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `(train, validation)` row counts for a 90/10 split.
pub fn split_sizes(n: usize) -> (usize, usize) {
    let val = (n / 10).max(1).min(n);
    (n - val, val)
}

/// Per-coordinate affine standardization fitted on training rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(data: ArrayView2<f64>) -> Result<Self> {
        let n = data.nrows();
        if n < 2 {
            return Err(Error::Data(format!("standardizer needs at least 2 rows, got {n}")));
        }
        let mut mean = vec![0.0; data.ncols()];
        let mut std = vec![0.0; data.ncols()];
        for (j, col) in data.columns().into_iter().enumerate() {
            let m = col.sum() / n as f64;
            let var = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
            mean[j] = m;
            std[j] = var.sqrt().max(STD_FLOOR);
        }
        Ok(Self { mean, std })
    }

    pub fn identity(d: usize) -> Self {
        Self { mean: vec![0.0; d], std: vec![1.0; d] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_at(&self, j: usize, x: f64) -> f64 {
        (x - self.mean[j]) / self.std[j]
    }

    pub fn invert_at(&self, j: usize, z: f64) -> f64 {
        z * self.std[j] + self.mean[j]
    }

    pub fn apply(&self, data: ArrayView2<f64>) -> Array2<f64> {
        let mut out = data.to_owned();
        for mut row in out.rows_mut() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = self.apply_at(j, *x);
            }
        }
        out
    }

    pub fn invert(&self, data: ArrayView2<f64>) -> Array2<f64> {
        let mut out = data.to_owned();
        for mut row in out.rows_mut() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = self.invert_at(j, *x);
            }
        }
        out
    }
}

/// One training-log row, written at every validation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    /// Mean minibatch loss since the previous row.
    pub train_loss: f64,
    pub val_loss: f64,
    pub ema_val_loss: f64,
    pub wallclock_ms: u128,
}

impl LogRow {
    pub const HEADER: &'static str = "step,lr,train_loss,val_loss,ema_val_loss,wallclock_ms";

    pub fn csv(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{}",
            self.step, self.lr, self.train_loss, self.val_loss, self.ema_val_loss, self.wallclock_ms
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Completed,
    EarlyStopped,
    /// A step cap smaller than `total_iters` was reached; the run can resume.
    Paused,
}

/// Training state. Everything needed to continue lives in the checkpoint.
pub struct Trainer {
    cfg: TrainConfig,
    hash: String,
    train: Array2<f64>,
    standardizer: Standardizer,
    weights: Vec<f64>,
    masks: MaskSampler,
    times: TimeSampler,
    schedule: LrSchedule,
    val_batch: PathBatch,
    params: VectorFieldParams,
    ema: Vec<f64>,
    best_ema: Vec<f64>,
    adam: AdamState,
    step: u64,
    best_val: f64,
    best_step: u64,
    bad_validations: usize,
    stopped: bool,
    loss_acc: (f64, u64),
    batch: PathBatch,
}

impl Trainer {
    /// Simulate `cfg.budget` pairs from the task and prepare a fresh run.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let data = simulate_joint(cfg.task, cfg.budget, &Rng::with_stream(cfg.seed, STREAM_DATA));
        Self::from_data(cfg, data)
    }

    /// Prepare a fresh run on a given raw joint dataset (`[theta; y]` rows).
    pub fn from_data(cfg: TrainConfig, data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(invalid("training budget must be at least 1 simulation"));
        }
        let mut cfg = cfg;
        cfg.budget = data.nrows();
        cfg.validate()?;
        if data.ncols() != cfg.task.dim() {
            return Err(Error::Shape(format!("dataset has {} columns, task needs {}", data.ncols(), cfg.task.dim())));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data("dataset contains non-finite values".into()));
        }
        let (n_train, _) = split_sizes(data.nrows());
        let mut order: Vec<usize> = (0..data.nrows()).collect();
        Rng::with_stream(cfg.seed, STREAM_SPLIT).shuffle(&mut order);
        let train_raw = data.select(ndarray::Axis(0), &order[..n_train]);
        let val_raw = data.select(ndarray::Axis(0), &order[n_train..]);
        let standardizer = Standardizer::fit(train_raw.view())?;
        let train = standardizer.apply(train_raw.view());
        let val = standardizer.apply(val_raw.view());

        let (dt, dy) = (cfg.task.d_theta(), cfg.task.d_y());
        let loss_cfg = cfg.loss_config();
        let weights = loss_cfg.weights(dt, dy)?;
        let masks = MaskSampler::new(cfg.mask, dt, dy)?;
        let times = TimeSampler::new(cfg.time_schedule);
        let schedule = LrSchedule::new(cfg.peak_lr, cfg.warmup_steps, cfg.total_iters)?;

        // one frozen draw of masks, times and noise for every validation row
        let mut vrng = Rng::with_stream(cfg.seed, STREAM_VAL);
        let mut val_batch = PathBatch::zeros(val.nrows(), cfg.task.dim());
        for (i, row) in val.rows().into_iter().enumerate() {
            fill_row(&mut val_batch, i, row.as_slice().unwrap(), &masks, &times, &mut vrng);
        }

        let params = VectorFieldParams::init(cfg.net_config(), &mut Rng::with_stream(cfg.seed, STREAM_INIT))?;
        let n = params.len();
        Ok(Self {
            hash: cfg.hash(),
            batch: PathBatch::zeros(cfg.batch_size, cfg.task.dim()),
            train,
            standardizer,
            weights,
            masks,
            times,
            schedule,
            val_batch,
            ema: params.values().to_vec(),
            best_ema: params.values().to_vec(),
            params,
            adam: AdamState::new(n),
            step: 0,
            best_val: f64::INFINITY,
            best_step: 0,
            bad_validations: 0,
            stopped: false,
            loss_acc: (0.0, 0),
            cfg,
        })
    }

    /// Continue a run from a checkpoint written by [`Trainer::checkpoint`].
    /// The config must hash to the value stored in the checkpoint.
    pub fn resume(cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        if cfg.hash() != ckpt.config_hash {
            return Err(invalid("config hash does not match the checkpoint; refusing to resume"));
        }
        let state = ckpt
            .resume
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no optimizer state".into()))?;
        let mut t = Self::new(cfg)?;
        if t.standardizer != ckpt.standardizer {
            return Err(Error::Checkpoint("regenerated data does not match the checkpoint".into()));
        }
        t.params = ckpt.raw_field()?;
        t.ema = state.ema_last.clone();
        t.best_ema = ckpt.ema.clone();
        t.adam = state.adam.clone();
        t.step = ckpt.iterations;
        t.best_val = ckpt.best_val_loss;
        t.best_step = ckpt.best_step;
        t.bad_validations = state.bad_validations;
        t.stopped = state.stopped;
        t.loss_acc = state.loss_acc;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn params(&self) -> &VectorFieldParams {
        &self.params
    }

    pub fn train_data(&self) -> ArrayView2<'_, f64> {
        self.train.view()
    }

    /// Run until `total_iters`, early stopping, or `max_steps` further steps.
    pub fn run(&mut self, max_steps: Option<u64>, mut on_log: impl FnMut(&LogRow)) -> Result<StopReason> {
        if self.stopped {
            return Ok(StopReason::EarlyStopped);
        }
        let clock = Instant::now();
        let limit = max_steps.map_or(self.cfg.total_iters, |m| (self.step + m).min(self.cfg.total_iters));
        while self.step < limit {
            let loss = self.optimizer_step()?;
            self.loss_acc.0 += loss;
            self.loss_acc.1 += 1;
            if self.step % self.cfg.val_every == 0 || self.step == self.cfg.total_iters {
                let row = self.validate(clock.elapsed().as_millis())?;
                on_log(&row);
                if self.stopped {
                    return Ok(StopReason::EarlyStopped);
                }
            }
        }
        Ok(if self.step >= self.cfg.total_iters { StopReason::Completed } else { StopReason::Paused })
    }

    fn optimizer_step(&mut self) -> Result<f64> {
        let mut rng = Rng::with_stream(self.cfg.seed, STREAM_STEPS).substream(self.step);
        let n = self.train.nrows();
        for i in 0..self.cfg.batch_size {
            let r = rng.index(n);
            let row = self.train.row(r);
            fill_row(&mut self.batch, i, row.as_slice().unwrap(), &self.masks, &self.times, &mut rng);
        }
        let lr = self.schedule.lr_at(self.step + 1);
        let (loss, mut grad) = flowcore::loss_and_grad(&self.params, &self.batch, &self.weights)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step: self.step + 1, lr, detail: format!("training loss {loss}") });
        }
        clip_global_norm(&mut grad, self.cfg.clip_norm);
        adam_step(self.params.values_mut(), &grad, &mut self.adam, lr, &self.cfg.adam).map_err(|e| match e {
            Error::Divergence { detail, .. } => Error::Divergence { step: self.step + 1, lr, detail },
            other => other,
        })?;
        ema_update(&mut self.ema, self.params.values(), self.cfg.ema_decay);
        self.step += 1;
        Ok(loss)
    }

    fn validate(&mut self, wallclock_ms: u128) -> Result<LogRow> {
        let val_loss = flowcore::loss_only(&self.params, &self.val_batch, &self.weights)?;
        let ema_field = VectorFieldParams::from_values(self.cfg.net_config(), self.ema.clone())?;
        let ema_val_loss = flowcore::loss_only(&ema_field, &self.val_batch, &self.weights)?;
        if !ema_val_loss.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                lr: self.schedule.lr_at(self.step),
                detail: format!("EMA validation loss {ema_val_loss}"),
            });
        }
        if ema_val_loss < self.best_val {
            self.best_val = ema_val_loss;
            self.best_step = self.step;
            self.best_ema.copy_from_slice(&self.ema);
            self.bad_validations = 0;
        } else {
            self.bad_validations += 1;
            if self.bad_validations >= self.cfg.patience {
                self.stopped = true;
            }
        }
        let (sum, count) = std::mem::take(&mut self.loss_acc);
        Ok(LogRow {
            step: self.step,
            lr: self.schedule.lr_at(self.step),
            train_loss: if count == 0 { f64::NAN } else { sum / count as f64 },
            val_loss,
            ema_val_loss,
            wallclock_ms,
        })
    }

    /// Fixed-draw loss estimate of arbitrary weights on the validation rows.
    pub fn validation_loss(&self, field: &VectorFieldParams) -> Result<f64> {
        flowcore::loss_only(field, &self.val_batch, &self.weights)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        // before the first validation the best EMA is the initial one
        Checkpoint {
            task: self.cfg.task,
            net: self.cfg.net_config(),
            standardizer: self.standardizer.clone(),
            raw: self.params.values().to_vec(),
            ema: self.best_ema.clone(),
            config_hash: self.hash.clone(),
            budget: self.cfg.budget,
            seed: self.cfg.seed,
            best_val_loss: self.best_val,
            best_step: self.best_step,
            iterations: self.step,
            resume: Some(ResumeState {
                adam: self.adam.clone(),
                ema_last: self.ema.clone(),
                bad_validations: self.bad_validations,
                stopped: self.stopped,
                loss_acc: self.loss_acc,
            }),
        }
    }
}

fn fill_row(batch: &mut PathBatch, i: usize, z1: &[f64], masks: &MaskSampler, times: &TimeSampler, rng: &mut Rng) {
    let mask = masks.sample(rng);
    let t = times.sample(rng);
    let z0 = flowcore::base_draw(rng, &mask);
    batch.set_row(i, &z0, z1, mask.bits(), t);
}

/// Simulate, train to completion or early stop, and return the checkpoint and log.
pub fn train(cfg: TrainConfig) -> Result<(Checkpoint, Vec<LogRow>)> {
    let mut trainer = Trainer::new(cfg)?;
    let mut log = Vec::new();
    trainer.run(None, |row| log.push(row.clone()))?;
    Ok((trainer.checkpoint(), log))
}
