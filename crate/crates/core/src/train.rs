//! SGD with momentum, multi-step learning-rate schedule and the training
//! loop.

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{augment, Dataset};
use crate::ensembling::{deterministic_predict, train_phase_ensemble_loss, Probs};
use crate::error::{Error, Result};
use crate::metrics;
use crate::models::{Mode, Model};
use crate::rng::{derive_seed, rng_from, stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_lr() -> f64 {
    0.1
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
        }
    }
}

/// Heavy-ball SGD with L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Self {
            cfg,
            velocity: Vec::new(),
        }
    }

    /// `v = momentum * v + (g + wd * w)`, `w -= lr * v`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::invalid("sgd", "one gradient per parameter required"));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if g.len() != p.numel() {
                return Err(Error::shape("sgd", p.shape(), &[g.len()]));
            }
            for ((w, gi), vi) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.cfg.momentum * *vi + gi + self.cfg.weight_decay * *w;
                *w -= lr * *vi;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub warmup_epochs: usize,
}

fn default_gamma() -> f64 {
    0.2
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            milestones: Vec::new(),
            gamma: default_gamma(),
            warmup_epochs: 0,
        }
    }
}

/// Step decay by `gamma` at each milestone epoch, with optional linear
/// warmup over the first epochs (updated per iteration).
#[derive(Clone, Debug, PartialEq)]
pub struct MultiStepLr {
    base: f64,
    cfg: ScheduleConfig,
}

impl MultiStepLr {
    pub fn new(base: f64, cfg: ScheduleConfig) -> Self {
        Self { base, cfg }
    }

    /// Learning rate of `epoch` (0-based) ignoring warmup.
    pub fn epoch_lr(&self, epoch: usize) -> f64 {
        let passed = self.cfg.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base * self.cfg.gamma.powi(passed as i32)
    }

    pub fn lr(&self, epoch: usize, iter: usize, iters_per_epoch: usize) -> f64 {
        let lr = self.epoch_lr(epoch);
        if epoch < self.cfg.warmup_epochs {
            let total = (self.cfg.warmup_epochs * iters_per_epoch.max(1)) as f64;
            let done = (epoch * iters_per_epoch.max(1) + iter + 1) as f64;
            lr * done / total
        } else {
            lr
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: SgdConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "default_true")]
    pub augment: bool,
    #[serde(default = "default_pad")]
    pub pad: usize,
    /// Stochastic passes averaged inside the loss; 1 is plain NLL.
    #[serde(default = "default_members")]
    pub ensemble_members: usize,
}

fn default_true() -> bool {
    true
}

fn default_pad() -> usize {
    2
}

fn default_members() -> usize {
    1
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.ensemble_members == 0 {
            return Err(Error::Config(
                "epochs, batch_size and ensemble_members must be positive".into(),
            ));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.momentum) || !(o.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        if !(self.schedule.gamma > 0.0) {
            return Err(Error::Config("schedule gamma must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_nll: f64,
    pub train_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_nll: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
}

/// Trains `model` in place. `on_epoch` runs after every completed epoch
/// (e.g. to write a checkpoint). A non-finite loss restores the weights
/// from the start of the failing epoch and returns [`Error::Diverged`].
pub fn train<F>(
    model: &mut Model,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: F,
) -> Result<Vec<EpochLog>>
where
    F: FnMut(&Model, &EpochLog) -> Result<()>,
{
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("train", "empty training set"));
    }
    let mut sgd = Sgd::new(cfg.optimizer);
    let sched = MultiStepLr::new(cfg.optimizer.lr, cfg.schedule.clone());
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let snapshot = model.clone();
        let mut shuffle = rng_from(seed, &[stream::SHUFFLE, epoch as u64]);
        let batches = train_set.batches(cfg.batch_size, Some(&mut shuffle));
        let (mut loss_sum, mut hits, mut seen) = (0.0, 0usize, 0usize);
        let mut lr = sched.epoch_lr(epoch);
        for (step, rows) in batches.iter().enumerate() {
            let batch = train_set.subset(rows)?;
            let x = if cfg.augment {
                let s = derive_seed(seed, &[stream::AUGMENT, epoch as u64, step as u64]);
                augment(batch.images(), cfg.pad, true, s)?
            } else {
                batch.images().clone()
            };
            let mut rng = rng_from(seed, &[stream::DROPOUT, epoch as u64, step as u64]);
            let mut tape = Tape::new();
            let params = model.bind(&mut tape);
            let xv = tape.constant(x);
            let mut logits = Vec::with_capacity(cfg.ensemble_members);
            let mut stats = Vec::new();
            for m in 0..cfg.ensemble_members {
                let out =
                    model.forward_graph(&mut tape, &params, xv, Mode::Train, &mut rng, None)?;
                if m == 0 {
                    stats = out.batch_stats;
                }
                logits.push(out.logits);
            }
            let loss = if cfg.ensemble_members == 1 {
                tape.cross_entropy(logits[0], batch.labels())?
            } else {
                train_phase_ensemble_loss(&mut tape, &logits, batch.labels())?
            };
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                *model = snapshot;
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: value,
                });
            }
            let probs = tape.softmax(logits[0])?;
            let p = Probs::from_tensor(tape.value(probs))?;
            hits += p
                .predictions()
                .iter()
                .zip(batch.labels())
                .filter(|(a, b)| a == b)
                .count();
            loss_sum += value * rows.len() as f64;
            seen += rows.len();

            tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = params
                .iter()
                .zip(model.params())
                .map(|(&v, p)| {
                    tape.grad(v)
                        .map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec)
                })
                .collect();
            lr = sched.lr(epoch, step, batches.len());
            sgd.step(model.params_mut(), &grads, lr)?;
            model.update_norm_states(&stats);
        }
        let (val_nll, val_accuracy) = match val_set {
            Some(v) if !v.is_empty() => {
                let p = deterministic_predict(model, v.images())?;
                (
                    Some(metrics::nll(&p, v.labels())?),
                    Some(metrics::accuracy(&p, v.labels())?),
                )
            }
            _ => (None, None),
        };
        let log = EpochLog {
            epoch,
            lr,
            train_nll: loss_sum / seen as f64,
            train_accuracy: hits as f64 / seen as f64,
            val_nll,
            val_accuracy,
        };
        on_epoch(model, &log)?;
        logs.push(log);
    }
    Ok(logs)
}
