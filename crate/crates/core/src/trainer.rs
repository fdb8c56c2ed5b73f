//! Joint SGD on kernel weights and keep logits under relaxed masks.
//!
//! Every random choice is keyed by the step index (minibatch order by epoch,
//! masks by step and example), so a run resumed from a checkpoint replays the
//! uninterrupted run exactly.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamMap;
use crate::checkpoint::{Checkpoint, Dtype};
use crate::data::Dataset;
use crate::error::{DataError, Error, Result};
use crate::objective::{total_loss, LossBreakdown, PriorConfig};
use crate::rng;
use crate::sampler::{sample_relaxed_logits, MaskSample, Temperature};
use crate::supernet::{MaskInput, SuperNet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauSchedule {
    #[default]
    Constant,
    Linear,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskGranularity {
    #[default]
    PerExample,
    PerBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// M.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    /// Keep logits step with `learning_rate * keep_lr_multiplier`.
    pub keep_lr_multiplier: f64,
    /// 0 disables momentum.
    pub momentum: f64,
    pub max_steps: usize,
    pub tau_schedule: TauSchedule,
    pub tau_start: f64,
    pub tau_end: f64,
    pub mask_granularity: MaskGranularity,
    pub seed: u64,
    /// Steps between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    pub convergence_window: usize,
    /// 0 trains for exactly `max_steps`.
    pub convergence_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 0.05,
            lr_schedule: LrSchedule::Constant,
            keep_lr_multiplier: 1.0,
            momentum: 0.9,
            max_steps: 2000,
            tau_schedule: TauSchedule::Constant,
            tau_start: 0.2,
            tau_end: 0.2,
            mask_granularity: MaskGranularity::PerExample,
            seed: 0,
            checkpoint_every: 0,
            convergence_window: 200,
            convergence_tol: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.batch_size == 0 {
            v.push("train.batch_size must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            v.push(format!("train.learning_rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if !(self.keep_lr_multiplier >= 0.0 && self.keep_lr_multiplier.is_finite()) {
            v.push(format!("train.keep_lr_multiplier must be non-negative, got {}", self.keep_lr_multiplier));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!("train.momentum must lie in [0, 1), got {}", self.momentum));
        }
        for (name, t) in [("tau_start", self.tau_start), ("tau_end", self.tau_end)] {
            if !(t > 0.0 && t.is_finite()) {
                v.push(format!("train.{name} must be positive, got {t}"));
            }
        }
        if self.convergence_window == 0 {
            v.push("train.convergence_window must be at least 1".into());
        }
        if !(self.convergence_tol >= 0.0) {
            v.push(format!("train.convergence_tol must be non-negative, got {}", self.convergence_tol));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let frac = step as f64 / self.max_steps.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    pub fn tau_at(&self, step: usize) -> f64 {
        match self.tau_schedule {
            TauSchedule::Constant => self.tau_start,
            TauSchedule::Linear => {
                let frac = (step as f64 / (self.max_steps.max(2) - 1) as f64).min(1.0);
                self.tau_start + (self.tau_end - self.tau_start) * frac
            }
        }
    }

    /// The fields that shape the trajectory; a resumed run must match them.
    fn trajectory_key(&self) -> TrainConfig {
        TrainConfig {
            max_steps: 0,
            checkpoint_every: 0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub data_nll: f64,
    pub entropy_term: f64,
    pub adaptive_l2: f64,
    pub total: f64,
    pub mean_keep: Vec<f64>,
    pub lr: f64,
    pub tau: f64,
    pub wall_time_s: f64,
}

/// Append-only per-step log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn push(&mut self, record: TrainRecord) {
        if let Some(last) = self.records.last() {
            assert!(record.step > last.step, "train log steps must increase");
        }
        self.records.push(record);
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut log = TrainLog::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let r = serde_json::from_str(line)
                .map_err(|e| Error::InvalidArgument(format!("train log line {}: {e}", i + 1)))?;
            log.push(r);
        }
        Ok(log)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub struct Trainer {
    net: SuperNet,
    config: TrainConfig,
    prior: PriorConfig,
    n: usize,
    step: usize,
    velocity: ParamMap,
    history: Vec<f64>,
    started: Instant,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub net: SuperNet,
    pub log: TrainLog,
    pub steps: usize,
    pub converged: bool,
    pub checkpoints: Vec<PathBuf>,
}

/// Relaxed masks for one step: one per example, or one shared.
pub fn step_masks(net: &SuperNet, config: &TrainConfig, step: usize, batch: usize) -> Result<Vec<MaskSample>> {
    let tau = Temperature::new(config.tau_at(step))?;
    let logits = net.keep_logits_per_slice();
    let base = rng::derive_seed(config.seed, "train/mask", step as u64);
    let count = match config.mask_granularity {
        MaskGranularity::PerExample => batch,
        MaskGranularity::PerBatch => 1,
    };
    Ok((0..count)
        .map(|j| sample_relaxed_logits(&logits, tau, rng::derive_seed(base, "example", j as u64)))
        .collect())
}

/// Example indices of the minibatch used at `step`.
pub fn batch_indices(config: &TrainConfig, len: usize, step: usize) -> Vec<usize> {
    let m = config.batch_size.min(len);
    let per_epoch = len / m;
    let (epoch, b) = (step / per_epoch, step % per_epoch);
    let mut order: Vec<usize> = (0..len).collect();
    rng::shuffle(&mut order, &mut rng::stream(config.seed, "train/shuffle", epoch as u64));
    order[b * m..(b + 1) * m].to_vec()
}

impl Trainer {
    pub fn new(net: SuperNet, config: &TrainConfig, prior: &PriorConfig, train_len: usize) -> Result<Self> {
        config.validate()?;
        let bad = prior.violations();
        if !bad.is_empty() {
            return Err(Error::Config(bad));
        }
        if train_len == 0 {
            return Err(DataError::EmptySplit("train").into());
        }
        let velocity = net
            .params()
            .into_iter()
            .map(|(k, t)| (k, Tensor::zeros(t.shape())))
            .collect();
        Ok(Self {
            n: prior.resolve_n(train_len),
            net,
            config: config.clone(),
            prior: prior.clone(),
            step: 0,
            velocity,
            history: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn net(&self) -> &SuperNet {
        &self.net
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// One descent step on a minibatch; returns the pre-update loss.
    pub fn train_step(&mut self, inputs: &Tensor, labels: &[usize]) -> Result<LossBreakdown> {
        let masks = step_masks(&self.net, &self.config, self.step, labels.len())?;
        let (loss, grads) = total_loss(
            &self.net,
            inputs,
            labels,
            MaskInput::Relaxed(&masks),
            &self.prior,
            self.n,
            true,
        )?;
        let grads = grads.expect("requested");
        let lr = self.config.lr_at(self.step);
        let mu = self.config.momentum;
        for (name, param) in self.net.params_mut() {
            let g = &grads[&name];
            let v = self.velocity.get_mut(&name).expect("velocity per parameter");
            let rate = if name.ends_with("keep_logit") {
                lr * self.config.keep_lr_multiplier
            } else {
                lr
            };
            for ((p, v), g) in param.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *v = mu * *v + g;
                *p -= rate * *v;
            }
        }
        self.history.push(loss.total);
        self.step += 1;
        Ok(loss)
    }

    fn record(&self, step: usize, loss: &LossBreakdown) -> TrainRecord {
        TrainRecord {
            step,
            data_nll: loss.data_nll,
            entropy_term: loss.entropy_term,
            adaptive_l2: loss.adaptive_l2,
            total: loss.total,
            mean_keep: self.net.mean_keep_per_layer(),
            lr: self.config.lr_at(step),
            tau: self.config.tau_at(step),
            wall_time_s: self.started.elapsed().as_secs_f64(),
        }
    }

    /// Windowed relative improvement of the mean total loss fell below tolerance.
    /// A zero tolerance never converges.
    pub fn converged(&self) -> bool {
        let w = self.config.convergence_window;
        let h = &self.history;
        if self.config.convergence_tol == 0.0 || h.len() < 2 * w {
            return false;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let prev = mean(&h[h.len() - 2 * w..h.len() - w]);
        let cur = mean(&h[h.len() - w..]);
        (prev - cur) / prev.abs().max(f64::MIN_POSITIVE) < self.config.convergence_tol
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_net(&self.net);
        for (k, v) in &self.velocity {
            c.state.insert(format!("velocity/{k}"), v.clone());
        }
        if !self.history.is_empty() {
            c.state.insert("loss_history".into(), Tensor::vector(self.history.clone()));
        }
        c.meta.insert("step".into(), self.step.to_string());
        c.meta.insert("train_size".into(), self.n.to_string());
        c.meta.insert(
            "train_config".into(),
            serde_json::to_string(&self.config.trajectory_key()).expect("config serializes"),
        );
        c.meta.insert("prior_config".into(), serde_json::to_string(&self.prior).expect("config serializes"));
        c
    }

    /// Rebuilds a trainer mid-run. The configs must match the ones that wrote
    /// the checkpoint, except for `max_steps` and `checkpoint_every`.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: &TrainConfig, prior: &PriorConfig) -> Result<Self> {
        let net = ckpt.to_net()?;
        let meta = |k: &str| {
            ckpt.meta
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("not a training checkpoint: missing {k}")))
        };
        let stored: TrainConfig =
            serde_json::from_str(meta("train_config")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if stored != config.trajectory_key() {
            return Err(Error::Checkpoint("train config differs from the one that wrote the checkpoint".into()));
        }
        let stored_prior: PriorConfig =
            serde_json::from_str(meta("prior_config")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if &stored_prior != prior {
            return Err(Error::Checkpoint("prior config differs from the one that wrote the checkpoint".into()));
        }
        let n: usize = meta("train_size")?.parse().map_err(|_| Error::Checkpoint("bad train_size".into()))?;
        let step: usize = meta("step")?.parse().map_err(|_| Error::Checkpoint("bad step".into()))?;
        let mut t = Trainer::new(net, config, prior, n)?;
        t.n = n;
        t.step = step;
        for (k, v) in t.velocity.iter_mut() {
            let stored = ckpt
                .state
                .get(&format!("velocity/{k}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing velocity for {k}")))?;
            if stored.shape() != v.shape() {
                return Err(Error::Checkpoint(format!("velocity for {k} has the wrong shape")));
            }
            *v = stored.clone();
        }
        t.history = ckpt.state.get("loss_history").map(|h| h.data().to_vec()).unwrap_or_default();
        if t.history.len() != step {
            return Err(Error::Checkpoint("loss history does not match the step count".into()));
        }
        Ok(t)
    }

    /// Trains until `max_steps` or convergence, checkpointing into `dir` at the configured cadence.
    pub fn run(mut self, data: &Dataset, dir: Option<&Path>) -> Result<TrainOutcome> {
        if data.is_empty() {
            return Err(DataError::EmptySplit("train").into());
        }
        let mut log = TrainLog::default();
        let mut checkpoints = Vec::new();
        let mut converged = false;
        while self.step < self.config.max_steps {
            let step = self.step;
            let (x, y) = data.batch(&batch_indices(&self.config, data.len(), step))?;
            let loss = self.train_step(&x, &y)?;
            log.push(self.record(step, &loss));
            let every = self.config.checkpoint_every;
            if let (Some(dir), true) = (dir, every > 0 && self.step.is_multiple_of(every)) {
                let path = dir.join(format!("step-{:07}.ckpt", self.step));
                self.checkpoint().save(&path, Dtype::F64)?;
                checkpoints.push(path);
            }
            if self.converged() {
                converged = true;
                break;
            }
        }
        Ok(TrainOutcome {
            steps: self.step,
            net: self.net,
            log,
            converged,
            checkpoints,
        })
    }
}

/// Trains a fresh trainer over `data`.
pub fn train(
    net: SuperNet,
    data: &Dataset,
    config: &TrainConfig,
    prior: &PriorConfig,
    dir: Option<&Path>,
) -> Result<TrainOutcome> {
    Trainer::new(net, config, prior, data.len())?.run(data, dir)
}
