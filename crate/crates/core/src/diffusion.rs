//! Noise-prediction training: L_simple with uniform timesteps and label dropout.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, BatchSource};
use crate::error::{bail, Result};
use crate::model::NoisePredictor;
use crate::nn::Module;
use crate::optim::AdamW;
use crate::schedule::ScheduleTable;
use crate::tensor::{Float, Rng, Tensor};

/// RNG stream used by the training loop (timesteps, noise, label dropout, dropout masks).
pub const TRAIN_STREAM: u64 = 0x0074_7261_696e;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub num_epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub label_dropout_prob: f64,
    pub log_every: u64,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_epochs: 480,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            batch_size: 128,
            seed: 42,
            label_dropout_prob: 0.1,
            log_every: 1,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bail!(Config, "learning_rate must be positive, got {}", self.learning_rate);
        }
        if !(0.0..1.0).contains(&self.label_dropout_prob) {
            bail!(Config, "label_dropout_prob must be in [0, 1), got {}", self.label_dropout_prob);
        }
        if self.weight_decay < 0.0 {
            bail!(Config, "weight_decay must be non-negative");
        }
        if self.batch_size == 0 || self.log_every == 0 {
            bail!(Config, "batch_size and log_every must be at least 1");
        }
        Ok(())
    }
}

/// I.i.d. uniform integers in [0, T−1].
pub fn sample_timesteps(rng: &mut Rng, batch_size: usize, num_timesteps: usize) -> Vec<usize> {
    (0..batch_size).map(|_| rng.below(num_timesteps.max(1))).collect()
}

/// Replaces each label by `null` with probability `p`.
pub fn drop_labels(labels: &[usize], null: usize, p: f64, rng: &mut Rng) -> Vec<usize> {
    labels
        .iter()
        .map(|&l| if rng.bernoulli(p) { null } else { l })
        .collect()
}

/// Mean squared error between injected and predicted noise.
///
/// Randomness is drawn from `rng` in a fixed order: timesteps, noise, label
/// dropout, then any dropout masks inside the model.
pub fn compute_loss<T: Float, M: NoisePredictor<T> + ?Sized>(
    model: &M,
    table: &ScheduleTable,
    batch: &Batch<T>,
    label_dropout_prob: f64,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    let n = batch.len();
    let timesteps = sample_timesteps(rng, n, table.num_timesteps());
    let noise = Tensor::<T>::random_normal(batch.images.shape(), rng);
    let labels = match (model.null_class(), &batch.labels) {
        (None, _) => None,
        (Some(null), Some(l)) => Some(drop_labels(l, null, label_dropout_prob, rng)),
        (Some(_), None) => bail!(Input, "class-conditional model needs labelled data"),
    };
    let x_t = table.add_noise(&batch.images, &noise, &timesteps)?;
    let eps = model.predict_noise(&x_t, &timesteps, labels.as_deref(), Some(rng))?;
    Ok(eps.sub(&noise)?.square().mean())
}

/// One optimizer update. Returns the loss measured before the update.
pub fn train_step<T: Float, M: NoisePredictor<T> + Module<T>>(
    model: &mut M,
    opt: &mut AdamW<T>,
    table: &ScheduleTable,
    batch: &Batch<T>,
    label_dropout_prob: f64,
    rng: &mut Rng,
) -> Result<f64> {
    model.zero_grad();
    let loss = compute_loss(model, table, batch, label_dropout_prob, rng)?;
    let value = loss.item()?.as_f64();
    if !value.is_finite() {
        bail!(
            Numeric,
            "non-finite loss {value} at step {} (batch of {})",
            opt.step_count() + 1,
            batch.len()
        );
    }
    loss.backward()?;
    opt.step(model)?;
    Ok(value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub kind: String,
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub steps: u64,
    pub records: Vec<LogRecord>,
}

impl TrainReport {
    pub fn step_losses(&self) -> Vec<f64> {
        self.records.iter().filter(|r| r.kind == "step").map(|r| r.loss).collect()
    }
}

fn emit(log: &mut dyn Write, report: &mut TrainReport, rec: LogRecord) -> Result<()> {
    let line = serde_json::to_string(&rec).map_err(|e| crate::Error::Format(e.to_string()))?;
    writeln!(log, "{line}")?;
    report.records.push(rec);
    Ok(())
}

/// Runs `cfg.num_epochs` passes over `source`, writing one JSON record per
/// logged step and per epoch to `log`.
pub fn train<T, M, S>(
    model: &mut M,
    opt: &mut AdamW<T>,
    table: &ScheduleTable,
    source: &mut S,
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainReport>
where
    T: Float,
    M: NoisePredictor<T> + Module<T>,
    S: BatchSource<T> + ?Sized,
{
    cfg.validate()?;
    let mut rng = Rng::derive(cfg.seed, TRAIN_STREAM);
    let mut report = TrainReport::default();
    'epochs: for epoch in 0..cfg.num_epochs {
        let (mut total, mut count) = (0.0, 0usize);
        for batch in source.batches(epoch)? {
            let batch = batch?;
            let loss = train_step(model, opt, table, &batch, cfg.label_dropout_prob, &mut rng)?;
            total += loss;
            count += 1;
            report.steps += 1;
            let step = report.steps;
            if step % cfg.log_every == 0 {
                let rec = LogRecord { kind: "step".into(), step, epoch, loss, lr: opt.lr };
                emit(log, &mut report, rec)?;
            }
            if cfg.max_steps.is_some_and(|m| step >= m) {
                let rec = LogRecord { kind: "epoch".into(), step, epoch, loss: total / count as f64, lr: opt.lr };
                emit(log, &mut report, rec)?;
                break 'epochs;
            }
        }
        if count == 0 {
            bail!(Config, "dataset yields no batches (is batch_size larger than the dataset?)");
        }
        let rec = LogRecord { kind: "epoch".into(), step: report.steps, epoch, loss: total / count as f64, lr: opt.lr };
        emit(log, &mut report, rec)?;
    }
    Ok(report)
}
