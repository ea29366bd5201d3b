//! AdamW, the linear warm-up/decay schedule, dataset splits, and a seeded
//! training loop with periodic dev evaluation and patience-based early stopping.

use std::collections::BTreeMap;

use alora_tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::Example;
use crate::network::{ForwardOptions, ParamId, SuperNetwork};
use crate::rng::{Rng, SeedTree};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub warmup_frac: f64,
    pub batch_size: usize,
    pub max_epochs: f64,
    pub eval_every_steps: usize,
    pub patience: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 1e-4,
            warmup_frac: 0.06,
            batch_size: 16,
            max_epochs: 10.0,
            eval_every_steps: 50,
            patience: 10,
            seed: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |n: &str| format!("{prefix}{n}");
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return Err(Error::config(field("lr_peak"), "must be positive"));
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(Error::config(field("warmup_frac"), "must lie in (0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(field("batch_size"), "must be positive"));
        }
        if !(self.max_epochs > 0.0 && self.max_epochs.is_finite()) {
            return Err(Error::config(field("max_epochs"), "must be positive"));
        }
        if self.eval_every_steps == 0 {
            return Err(Error::config(field("eval_every_steps"), "must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::config(field("patience"), "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config(field("beta1"), "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config(field("beta2"), "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(field("eps"), "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(field("weight_decay"), "must be non-negative"));
        }
        Ok(())
    }
}

/// Number of warm-up steps for a schedule of `total_steps`.
pub fn warmup_steps(total_steps: usize, cfg: &TrainConfig) -> usize {
    ((cfg.warmup_frac * total_steps as f64).ceil() as usize).clamp(1, total_steps.max(1))
}

/// Linear ramp from 0 to `lr_peak` over the warm-up, then linear decay to 0
/// at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let warm = warmup_steps(total_steps, cfg);
    if step >= total_steps {
        return 0.0;
    }
    if step < warm {
        cfg.lr_peak * step as f64 / warm as f64
    } else {
        cfg.lr_peak * (total_steps - step) as f64 / (total_steps - warm).max(1) as f64
    }
}

/// Adaptive moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<&(Tensor, Tensor)> {
        self.moments.get(&id)
    }

    /// Applies one update to every `id` in `ids`. Every id needs a gradient.
    pub fn step(
        &mut self,
        net: &mut SuperNetwork,
        ids: &[ParamId],
        grads: &BTreeMap<ParamId, Tensor>,
        lr: f64,
    ) -> Result<()> {
        if let Some(id) = ids.iter().find(|id| !grads.contains_key(id)) {
            return Err(Error::State(format!("no gradient for trainable parameter {id:?}")));
        }
        self.step += 1;
        for id in ids {
            let param = net
                .param_mut(*id)
                .ok_or_else(|| Error::State(format!("unknown parameter {id:?}")))?;
            self.update(*id, param, &grads[id], lr)?;
        }
        Ok(())
    }

    fn update(&mut self, id: ParamId, param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
        if grad.shape() != param.shape() {
            return Err(Error::State(format!(
                "gradient shape {:?} does not match parameter {id:?} {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        let [rows, cols] = param.shape();
        let entry = self
            .moments
            .entry(id)
            .or_insert_with(|| (Tensor::zeros(rows, cols), Tensor::zeros(rows, cols)));
        if entry.0.shape() != param.shape() {
            // grown parameter: old moments keep their positions, new entries start at zero
            entry.0 = entry.0.embed_into(rows, cols)?;
            entry.1 = entry.1.embed_into(rows, cols)?;
        }
        let (m, v) = entry;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), mi), vi) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Disjoint train / dev / test partitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSplits {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

pub const MIN_SPLIT_SIZE: usize = 30;

/// Seeded shuffle, then 80 / 10 / 10.
pub fn split_dataset(raw: &[Example], seed: u64) -> Result<DataSplits> {
    split_indices(raw.len(), seed).map(|(tr, dv, te)| {
        let pick = |idx: &[usize]| idx.iter().map(|&i| raw[i].clone()).collect();
        DataSplits {
            train: pick(&tr),
            dev: pick(&dv),
            test: pick(&te),
        }
    })
}

/// Index form of [`split_dataset`].
pub fn split_indices(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if n < MIN_SPLIT_SIZE {
        return Err(Error::Argument(format!(
            "need at least {MIN_SPLIT_SIZE} examples to split, got {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut SeedTree::new(seed).rng("split"));
    let n_dev = n / 10;
    let n_test = n / 10;
    let n_train = n - n_dev - n_test;
    let test = idx.split_off(n_train + n_dev);
    let dev = idx.split_off(n_train);
    Ok((idx, dev, test))
}

/// One dev evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub lr: f64,
    pub active_ranks_total: usize,
}

/// Forward, backward, and one optimiser update on `ids`; returns the batch loss.
pub fn gradient_step(
    net: &mut SuperNetwork,
    batch: &[&Example],
    opts: ForwardOptions<'_>,
    ids: &[ParamId],
    optim: &mut AdamW,
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, pass) = net.forward_loss(&mut tape, batch, ForwardOptions { track_grads: true, ..opts })?;
    tape.backward(loss)?;
    let grads: BTreeMap<ParamId, Tensor> = pass
        .params
        .iter()
        .map(|(id, v)| (*id, tape.grad_tensor(*v)))
        .collect();
    optim.step(net, ids, &grads, lr)?;
    Ok(tape.value(loss).get(0, 0))
}

#[derive(Debug, Clone)]
struct EarlyStop {
    best: f64,
    since_best: usize,
    stopped: bool,
    snapshot: Option<(SuperNetwork, usize)>,
}

impl EarlyStop {
    fn new() -> Self {
        Self {
            best: f64::INFINITY,
            since_best: 0,
            stopped: false,
            snapshot: None,
        }
    }
}

/// Result of one [`Trainer::train_for`] call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOutcome {
    pub steps: usize,
    pub early_stopped: bool,
}

/// One continuous training trajectory. The schedule length is fixed up front
/// from `max_epochs`, so successive `train_for` calls share one warm-up/decay
/// curve and one optimiser state.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    splits: DataSplits,
    optim: AdamW,
    steps_per_epoch: usize,
    total_steps: usize,
    step: usize,
    order: Vec<usize>,
    cursor: usize,
    batch_rng: Rng,
    early: EarlyStop,
    log: Vec<MetricsRecord>,
    loss_sum: f64,
    loss_count: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, splits: DataSplits) -> Result<Self> {
        cfg.validate("train.")?;
        if splits.train.is_empty() {
            return Err(Error::Argument("empty train split".into()));
        }
        if splits.dev.is_empty() {
            return Err(Error::Argument("empty dev split".into()));
        }
        let steps_per_epoch = splits.train.len().div_ceil(cfg.batch_size);
        let total_steps = ((cfg.max_epochs * steps_per_epoch as f64).ceil() as usize).max(1);
        Ok(Self {
            cfg,
            optim: AdamW::from_config(&cfg),
            steps_per_epoch,
            total_steps,
            step: 0,
            order: Vec::new(),
            cursor: 0,
            batch_rng: SeedTree::new(cfg.seed).rng("batches"),
            early: EarlyStop::new(),
            log: Vec::new(),
            loss_sum: 0.0,
            loss_count: 0,
            splits,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn splits(&self) -> &DataSplits {
        &self.splits
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn steps_remaining(&self) -> usize {
        self.total_steps.saturating_sub(self.step)
    }

    /// Optimiser steps corresponding to `epochs` (fractional epochs round up).
    pub fn steps_for(&self, epochs: f64) -> usize {
        (epochs * self.steps_per_epoch as f64).ceil() as usize
    }

    pub fn log(&self) -> &[MetricsRecord] {
        &self.log
    }

    pub fn early_stopped(&self) -> bool {
        self.early.stopped
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optim
    }

    pub fn current_lr(&self) -> f64 {
        lr_at(self.step, self.total_steps, &self.cfg)
    }

    /// Forget the best-dev snapshot and patience count after the adapter
    /// structure changes; snapshots of the old structure are not restorable.
    pub fn structure_changed(&mut self) {
        self.early = EarlyStop {
            stopped: self.early.stopped,
            ..EarlyStop::new()
        };
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.order = (0..self.splits.train.len()).collect();
            self.order.shuffle(&mut self.batch_rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.cfg.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }

    /// Runs `ceil(epochs · steps_per_epoch)` steps unless early stopping fires first.
    pub fn train_for(&mut self, net: &mut SuperNetwork, epochs: f64) -> Result<TrainOutcome> {
        if !(epochs >= 0.0) {
            return Err(Error::Argument(format!("epochs must be non-negative, got {epochs}")));
        }
        self.train_steps(net, self.steps_for(epochs))
    }

    /// Runs up to `n` optimiser steps, stopping early if patience runs out.
    pub fn train_steps(&mut self, net: &mut SuperNetwork, n: usize) -> Result<TrainOutcome> {
        let mut done = 0;
        while done < n && !self.early.stopped {
            let idx = self.next_batch();
            let batch: Vec<&Example> = idx.iter().map(|&i| &self.splits.train[i]).collect();
            let lr = lr_at(self.step, self.total_steps, &self.cfg);
            let ids = net.trainable_ids();
            let loss = gradient_step(net, &batch, ForwardOptions::train(), &ids, &mut self.optim, lr)?;
            if !loss.is_finite() {
                return Err(Error::Invariant(format!("non-finite training loss at step {}", self.step)));
            }
            self.loss_sum += loss;
            self.loss_count += 1;
            self.step += 1;
            done += 1;
            if self.step % self.cfg.eval_every_steps == 0 {
                self.evaluate(net)?;
            }
        }
        Ok(TrainOutcome {
            steps: done,
            early_stopped: self.early.stopped,
        })
    }

    fn evaluate(&mut self, net: &SuperNetwork) -> Result<f64> {
        let dev_loss = net.dataset_loss(&self.splits.dev, None)?;
        let train_loss = if self.loss_count > 0 {
            self.loss_sum / self.loss_count as f64
        } else {
            f64::NAN
        };
        self.loss_sum = 0.0;
        self.loss_count = 0;
        self.log.push(MetricsRecord {
            step: self.step,
            train_loss,
            dev_loss,
            lr: lr_at(self.step, self.total_steps, &self.cfg),
            active_ranks_total: net.active_rank_count().total,
        });
        if dev_loss < self.early.best {
            self.early.best = dev_loss;
            self.early.since_best = 0;
            self.early.snapshot = Some((net.clone(), self.step));
        } else {
            self.early.since_best += 1;
            if self.early.since_best >= self.cfg.patience {
                self.early.stopped = true;
            }
        }
        Ok(dev_loss)
    }

    /// Final dev check: restores the best snapshot of the current structure if
    /// it beats the live network. Returns the resulting dev loss.
    pub fn finish(&mut self, net: &mut SuperNetwork) -> Result<f64> {
        let current = net.dataset_loss(&self.splits.dev, None)?;
        match self.early.snapshot.take() {
            Some((best, _)) if self.early.best < current => {
                *net = best;
                Ok(self.early.best)
            }
            _ => Ok(current),
        }
    }

    /// JSON-lines rendering of the metrics log.
    pub fn metrics_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.log {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}
