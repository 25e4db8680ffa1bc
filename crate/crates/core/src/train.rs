//! Optimization: AdamW with zero weight decay, linear warmup into cosine
//! annealing, global gradient-norm clipping, deterministic shuffled batching,
//! and parameter freezing.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{SampleRecord, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{ParamStore, Session};
use crate::tape::Var;
use crate::util::rng_for;

/// Warmup + cosine-annealing schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_frac: f64,
    pub floor_lr: f64,
    pub total_steps: usize,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!("warmup fraction {} outside [0, 1)", self.warmup_frac)));
        }
        if self.floor_lr > self.peak_lr || self.floor_lr < 0.0 {
            return Err(Error::Config(format!(
                "floor lr {} must lie in [0, peak {}]",
                self.floor_lr, self.peak_lr
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.total_steps as f64).ceil() as usize
    }
}

/// Learning rate at `step`: linear `0 -> peak` over the warmup, then
/// `floor + (peak - floor) * (1 + cos(pi * progress)) / 2`. Steps past the
/// end clamp to the floor.
pub fn lr_at(step: usize, cfg: &ScheduleConfig) -> f64 {
    let warmup = cfg.warmup_steps();
    if step <= warmup && warmup > 0 {
        return cfg.peak_lr * step as f64 / warmup as f64;
    }
    if step >= cfg.total_steps {
        return cfg.floor_lr;
    }
    let span = (cfg.total_steps - warmup) as f64;
    let progress = (step - warmup) as f64 / span;
    cfg.floor_lr + (cfg.peak_lr - cfg.floor_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam hyperparameters; decoupled weight decay is zero throughout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> AdamConfig {
        AdamConfig { beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 0.0 }
    }
}

/// AdamW state: first/second moment buffers per parameter plus a step count.
pub struct AdamW {
    pub cfg: AdamConfig,
    step: usize,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new(cfg: AdamConfig) -> AdamW {
        AdamW { cfg, step: 0, moments: Vec::new() }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One bias-corrected update over every unfrozen parameter. Frozen
    /// parameters are skipped entirely; a non-finite gradient aborts the
    /// step before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.moments.len() < store.len() {
            self.moments.resize_with(store.len(), || None);
        }
        for (_, p) in store.iter() {
            if p.frozen {
                continue;
            }
            if let Some(bad) = p.grad.iter().find(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {bad} in parameter {}; step aborted",
                    p.name
                )));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for (idx, p) in store.params_mut().iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let (m, v) = self.moments[idx]
                .get_or_insert_with(|| (vec![0.0; p.grad.len()], vec![0.0; p.grad.len()]));
            let values = p.value.data_mut();
            for j in 0..values.len() {
                let g = p.grad[j];
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * g;
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                values[j] -=
                    lr * (m_hat / (v_hat.sqrt() + self.cfg.epsilon) + self.cfg.weight_decay * values[j]);
            }
        }
        Ok(())
    }
}

/// Scale all trainable gradients so the global L2 norm is at most
/// `max_norm`; returns the observed (pre-clip) norm.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Config(format!("max_norm must be positive, got {max_norm}")));
    }
    let mut sq = 0.0;
    for (_, p) in store.iter() {
        if p.frozen {
            continue;
        }
        sq += p.grad.iter().map(|g| g * g).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in store.params_mut() {
            if p.frozen {
                continue;
            }
            p.grad.iter_mut().for_each(|g| *g *= scale);
        }
    }
    Ok(norm)
}

/// Training-loop parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub floor_lr: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            steps: 1500,
            batch_size: 8,
            peak_lr: 1e-4,
            warmup_frac: 0.03,
            floor_lr: 0.0,
            clip_norm: 1.0,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            peak_lr: self.peak_lr,
            warmup_frac: self.warmup_frac,
            floor_lr: self.floor_lr,
            total_steps: self.steps,
        }
    }
}

/// One line of the training trace.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.steps.last().map_or(f64::NAN, |s| s.loss)
    }

    pub fn initial_loss(&self) -> f64 {
        self.steps.first().map_or(f64::NAN, |s| s.loss)
    }
}

/// A differentiable training objective over one batch.
pub trait BatchLoss {
    fn batch_loss(
        &self,
        model: &Model,
        sess: &mut Session,
        batch: &[&SampleRecord],
    ) -> Result<Var>;
}

/// Mean cross-entropy over sequence positions, excluding PAD labels.
///
/// Shared by plain training and the distillation CE term, so that a
/// distillation loss with `beta = 0` is bit-equal to pseudo-label
/// fine-tuning.
pub fn sequence_ce_loss(sess: &mut Session, logits: Var, labels: &[usize]) -> Result<Var> {
    let rows = sess.tape.shape(logits)[0];
    if rows != labels.len() {
        return Err(Error::Contract(format!(
            "{rows} logit rows vs {} labels",
            labels.len()
        )));
    }
    let keep: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != PAD).collect();
    if keep.is_empty() {
        return Err(Error::Contract("all label positions are PAD".into()));
    }
    let ls = sess.tape.log_softmax(logits, 1)?;
    let picked = sess.tape.take_per_row(ls, labels)?;
    let kept = if keep.len() == labels.len() {
        picked
    } else {
        sess.tape.gather_rows(picked, &keep)?
    };
    let mean = sess.tape.reduce_mean(kept, 0)?;
    sess.tape.scale(mean, -1.0)
}

/// Teacher-forcing targets `[BOS, t1..tn]` and labels `[t1..tn, EOS]`.
pub fn teacher_forcing_pair(targets: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut inputs = Vec::with_capacity(targets.len() + 1);
    inputs.push(BOS);
    inputs.extend_from_slice(targets);
    let mut labels = Vec::with_capacity(targets.len() + 1);
    labels.extend_from_slice(targets);
    labels.push(EOS);
    (inputs, labels)
}

/// Ground-truth cross-entropy objective.
pub struct CeLoss;

impl BatchLoss for CeLoss {
    fn batch_loss(
        &self,
        model: &Model,
        sess: &mut Session,
        batch: &[&SampleRecord],
    ) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for sample in batch {
            let (inputs, labels) = teacher_forcing_pair(&sample.targets);
            let logits = model.forward(sess, sample, &inputs)?;
            let loss = sequence_ce_loss(sess, logits, &labels)?;
            acc = Some(match acc {
                Some(a) => sess.tape.add(a, loss)?,
                None => loss,
            });
        }
        let total = acc.ok_or_else(|| Error::Contract("empty batch".into()))?;
        sess.tape.scale(total, 1.0 / batch.len() as f64)
    }
}

/// Deterministic shuffled batch stream: epoch `e` order is a pure function
/// of `(seed, e)`; batches may span epoch boundaries.
struct BatchStream {
    seed: u64,
    len: usize,
    epoch: usize,
    queue: VecDeque<usize>,
}

impl BatchStream {
    fn new(seed: u64, len: usize) -> BatchStream {
        BatchStream { seed, len, epoch: 0, queue: VecDeque::new() }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        while self.queue.len() < size {
            let mut order: Vec<usize> = (0..self.len).collect();
            order.shuffle(&mut rng_for(self.seed, &format!("epoch-{}", self.epoch)));
            self.epoch += 1;
            self.queue.extend(order);
        }
        self.queue.drain(..size).collect()
    }
}

/// Run the optimization loop. Deterministic given the seed; frozen
/// parameters never change; aborts with a numeric error if the loss or a
/// gradient goes non-finite.
pub fn fit(
    model: &mut Model,
    data: &[SampleRecord],
    loss: &dyn BatchLoss,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Contract("training dataset is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let schedule = cfg.schedule();
    schedule.validate()?;
    let mut optimizer = AdamW::new(cfg.adam);
    let mut stream = BatchStream::new(cfg.seed, data.len());
    let mut report = TrainReport::default();

    for step in 0..cfg.steps {
        model.store.zero_grads();
        let indices = stream.next_batch(cfg.batch_size.min(data.len()));
        let batch: Vec<&SampleRecord> = indices.iter().map(|&i| &data[i]).collect();

        let mut sess = Session::new(&model.store);
        let loss_var = loss
            .batch_loss(model, &mut sess, &batch)
            .map_err(|e| Error::Numeric(format!("step {step}: {e}")))?;
        let loss_val = sess.tape.value(loss_var).data()[0];
        if !loss_val.is_finite() {
            return Err(Error::Numeric(format!("step {step}: loss diverged to {loss_val}")));
        }
        sess.backward(loss_var)?;
        let grads = sess.into_param_grads();
        model.store.accumulate_grads(grads);

        let grad_norm = clip_grad_norm(&mut model.store, cfg.clip_norm)?;
        let lr = lr_at(step + 1, &schedule);
        optimizer.step(&mut model.store, lr)?;
        report.steps.push(StepRecord { step, loss: loss_val, lr, grad_norm });
    }
    Ok(report)
}
