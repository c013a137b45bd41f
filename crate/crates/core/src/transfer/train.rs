use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::TrainOpts;
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{random_feature_masking, FtModel, Predictions};
use crate::nn::{AdamW, ParamId, ParamStore, Tape, Var};
use crate::schema::EncodedBatch;
use crate::seeds::{self, Rng};

/// Anything the shared loop can optimise.
pub trait Trainable {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// Mean loss of `batch`; dropout is active iff `rng` is given.
    fn batch_loss(&self, tape: &mut Tape<'_>, batch: &EncodedBatch, rng: Option<&mut Rng>) -> Result<Var>;
    fn eval_loss(&self, batch: &EncodedBatch) -> Result<f64>;
    fn predict(&self, batch: &EncodedBatch) -> Result<Predictions>;
}

impl Trainable for FtModel {
    fn store(&self) -> &ParamStore {
        &self.params
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn batch_loss(&self, tape: &mut Tape<'_>, batch: &EncodedBatch, rng: Option<&mut Rng>) -> Result<Var> {
        self.loss(tape, batch, rng)
    }

    fn eval_loss(&self, batch: &EncodedBatch) -> Result<f64> {
        FtModel::eval_loss(self, batch)
    }

    fn predict(&self, batch: &EncodedBatch) -> Result<Predictions> {
        FtModel::predict(self, batch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
    Baseline,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
            Phase::Baseline => "baseline",
        }
    }
}

/// Parameters held fixed during the first `epochs` epochs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FreezeSchedule {
    pub epochs: usize,
    pub ids: BTreeSet<ParamId>,
    /// Human-readable names of the frozen groups, for traces.
    pub groups: Vec<String>,
}

impl FreezeSchedule {
    pub fn none() -> Self {
        Self::default()
    }

    fn active(&self, epoch: usize) -> bool {
        epoch <= self.epochs && !self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_r2: Option<f64>,
    pub val_mae: f64,
    pub lr: f64,
    pub frozen: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub phase: Phase,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were returned (1-based).
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainTrace {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }

    /// Append one JSON line per epoch to `path`.
    pub fn append_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        for e in &self.epochs {
            writeln!(f, "{}", serde_json::to_string(e)?).map_err(|err| Error::io(path, err))?;
        }
        Ok(())
    }
}

/// Patience-based stopping on strictly improving validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    since: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since: 0,
        }
    }

    /// Record an epoch; returns `(improved, stop)`.
    pub fn update(&mut self, epoch: usize, val_loss: f64) -> (bool, bool) {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.since = 0;
            (true, false)
        } else {
            self.since += 1;
            (false, self.since >= self.patience)
        }
    }
}

/// Learning rate of `epoch` (1-based) under the optional cosine schedule.
pub fn epoch_lr(base: f64, epoch: usize, max_epochs: usize, cosine: bool) -> f64 {
    if !cosine || max_epochs <= 1 {
        return base;
    }
    let t = (epoch - 1) as f64 / (max_epochs - 1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Mini-batch AdamW with early stopping; restores the best-validation weights.
pub fn train_model<M: Trainable>(
    model: &mut M,
    train: &EncodedBatch,
    val: &EncodedBatch,
    opts: &TrainOpts,
    phase: Phase,
    lr: f64,
    freeze: &FreezeSchedule,
) -> Result<TrainTrace> {
    opts.validate()?;
    if train.n == 0 || val.n == 0 {
        return Err(Error::Config(format!("{}: empty training or validation data", phase.as_str())));
    }
    let mut opt = AdamW::new(lr, opts.weight_decay);
    let mut order_rng = seeds::derive_rng(opts.seed, &format!("{}/order", phase.as_str()));
    let mut stopper = EarlyStopping::new(opts.patience);
    let mut best_params = model.store().clone();
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.n).collect();
    for epoch in 1..=opts.max_epochs {
        opt.lr = epoch_lr(lr, epoch, opts.max_epochs, opts.cosine);
        let frozen_now = freeze.active(epoch);
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        for (b, rows) in order.chunks(opts.batch_size).enumerate() {
            let batch_seed = seeds::derive(opts.seed, &format!("{}/{epoch}/{b}", phase.as_str()));
            let mut batch = train.rows(rows);
            if opts.feature_mask_rate > 0.0 {
                batch = random_feature_masking(&batch, opts.feature_mask_rate, batch_seed)?;
            }
            let mut drop_rng = seeds::rng(batch_seed);
            let mut tape = Tape::new(model.store());
            let loss = model.batch_loss(&mut tape, &batch, Some(&mut drop_rng))?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    phase: phase.as_str().into(),
                    epoch,
                    batch: b,
                    batch_seed,
                });
            }
            loss_sum += value * rows.len() as f64;
            let grads = tape.backward(loss);
            opt.step(model.store_mut(), &grads, |id| frozen_now && freeze.ids.contains(&id));
        }
        let val_loss = model.eval_loss(val)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                phase: format!("{}/validation", phase.as_str()),
                epoch,
                batch: 0,
                batch_seed: opts.seed,
            });
        }
        let pred = model.predict(val)?;
        epochs.push(EpochRecord {
            phase,
            epoch,
            train_loss: loss_sum / train.n as f64,
            val_loss,
            val_r2: metrics::r2(&val.target, &pred.mean).ok(),
            val_mae: metrics::mae(&val.target, &pred.mean)?,
            lr: opt.lr,
            frozen: if frozen_now { freeze.groups.clone() } else { Vec::new() },
        });
        let (improved, stop) = stopper.update(epoch, val_loss);
        if improved {
            best_params = model.store().clone();
        }
        if stop {
            stopped_early = epoch < opts.max_epochs;
            break;
        }
    }
    *model.store_mut() = best_params;
    Ok(TrainTrace {
        phase,
        best_epoch: stopper.best_epoch,
        epochs,
        stopped_early,
    })
}
