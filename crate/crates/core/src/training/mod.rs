//! Training loop, evaluation, metrics records and the gradient check.

mod gradcheck;
mod optim;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::ModelGraph;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{Mode, Tape, Tensor};

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckOptions, GradCheckReport};
pub use optim::{optimizer_step, OptimizerKind, OptimizerState};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    #[default]
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// SGD momentum.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: Schedule,
    pub label_smoothing: f64,
    /// Worker threads assembling batches; 0 means one per core.
    pub loader_threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adamw,
            lr: 1e-3,
            weight_decay: 0.0,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            schedule: Schedule::Cosine,
            label_smoothing: 0.0,
            loader_threads: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("train.lr {} must be a finite value ≥ 0", self.lr));
        }
        if self.batch_size == 0 {
            return fail("train.batch_size must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("train.label_smoothing {} must be in [0, 1)", self.label_smoothing));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("train.beta1 and train.beta2 must be in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("train.momentum {} must be in [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return fail("train.weight_decay must be ≥ 0 and train.eps > 0".into());
        }
        Ok(())
    }

    /// Learning rate for step `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine if total <= 1 => self.lr,
            Schedule::Cosine => self.lr * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos()),
        }
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub elapsed_seconds: f64,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics record serializes")
    }

    /// The record without its wall-clock field, for determinism comparisons.
    pub fn key(&self) -> (usize, &str, u64, u64) {
        (self.epoch, &self.split, self.loss.to_bits(), self.accuracy.to_bits())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub history: Vec<MetricsRecord>,
    pub steps: usize,
}

impl TrainReport {
    pub fn last(&self, split: &str) -> Option<&MetricsRecord> {
        self.history.iter().rev().find(|r| r.split == split)
    }
}

const EVAL_CHUNK: usize = 64;

fn check_compatible(model: &ModelGraph, data: &Dataset) -> Result<()> {
    let cfg = model.config();
    if data.num_classes() != cfg.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model head has {}",
            data.num_classes(),
            cfg.num_classes
        )));
    }
    let want = [cfg.in_channels, cfg.image_size, cfg.image_size];
    if data.image_shape() != want {
        return Err(Error::Config(format!(
            "dataset images are {:?} but the model expects {want:?}",
            data.image_shape()
        )));
    }
    Ok(())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(&logits.data()[i * k..(i + 1) * k]) == l)
        .count()
}

/// Eval-mode mean loss and accuracy over the whole dataset.
pub fn evaluate(model: &ModelGraph, data: &Dataset) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_compatible(model, data)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let parts: Vec<(f64, usize)> = idx
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| -> Result<(f64, usize)> {
            let (x, y) = data.batch(chunk)?;
            let mut tape = Tape::eval();
            let logits = model.forward(&mut tape, &x)?;
            let loss = tape.cross_entropy(logits, &y, 0.0)?;
            let loss = tape.value(loss).item();
            if !loss.is_finite() {
                return Err(Error::NonFinite("evaluation loss".into()));
            }
            Ok((loss * chunk.len() as f64, correct(tape.value(logits), &y)))
        })
        .collect::<Result<_>>()?;
    let n = data.len() as f64;
    let loss: f64 = parts.iter().map(|p| p.0).sum::<f64>() / n;
    let hits: usize = parts.iter().map(|p| p.1).sum();
    Ok(EvalMetrics {
        loss,
        accuracy: hits as f64 / n,
        count: data.len(),
    })
}

fn mix(seed: u64, a: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Batches for one epoch, in an order fixed by `(seed, epoch)`. Workers
/// assemble batches in parallel; collection preserves batch order.
fn epoch_batches(
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
    pool: &rayon::ThreadPool,
) -> Result<Vec<(Tensor, Vec<usize>)>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64)));
    pool.install(|| order.par_chunks(cfg.batch_size).map(|c| data.batch(c)).collect())
}

fn snapshot_frozen(model: &ModelGraph) -> Vec<(String, Tensor)> {
    model
        .params()
        .into_iter()
        .filter(|p| !p.trainable())
        .map(|p| (p.name().to_string(), p.value().clone()))
        .collect()
}

/// Error naming the first frozen parameter whose bits differ from `snap`.
pub fn verify_frozen(model: &ModelGraph, snap: &[(String, Tensor)]) -> Result<()> {
    for (name, before) in snap {
        match model.param(name) {
            Some(p) if !p.trainable() && p.value().bit_eq(before) => {}
            _ => return Err(Error::FrozenMutated(name.clone())),
        }
    }
    Ok(())
}

/// Train the trainable parameters of `model` on `train`, emitting one record
/// per epoch for the training split and, when given, the evaluation split.
pub fn train(
    model: &mut ModelGraph,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    on_record: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_compatible(model, train)?;
    if let Some(e) = eval {
        check_compatible(model, e)?;
    }
    let names: Vec<String> = model.trainable_parameters().iter().map(|p| p.name().to_string()).collect();
    if names.is_empty() {
        return Err(Error::Contract("model has no trainable parameters".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.loader_threads)
        .build()
        .map_err(|e| Error::Config(format!("loader threads: {e}")))?;
    let frozen = snapshot_frozen(model);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut state = OptimizerState::default();
    let mut history = Vec::new();
    let mut step = 0;
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut hits = 0;
        for (x, y) in epoch_batches(train, cfg, epoch, &pool)? {
            let mut tape = Tape::new(Mode::Train, mix(cfg.seed ^ 0xD50F, step as u64));
            let logits = model.forward(&mut tape, &x)?;
            let loss = tape.cross_entropy(logits, &y, cfg.label_smoothing)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            loss_sum += lv * y.len() as f64;
            hits += correct(tape.value(logits), &y);
            tape.backward(loss)?;
            let mut grads = BTreeMap::new();
            for n in &names {
                if let Some(g) = tape.param_grad(n) {
                    grads.insert(n.clone(), g);
                }
            }
            optimizer_step(model, &grads, &mut state, cfg, cfg.lr_at(step, total))?;
            step += 1;
        }
        verify_frozen(model, &frozen)?;
        let n = train.len() as f64;
        let rec = MetricsRecord {
            epoch,
            split: "train".into(),
            loss: loss_sum / n,
            accuracy: hits as f64 / n,
            elapsed_seconds: start.elapsed().as_secs_f64(),
        };
        on_record(&rec)?;
        history.push(rec);
        if let Some(e) = eval {
            let m = evaluate(model, e)?;
            let rec = MetricsRecord {
                epoch,
                split: "test".into(),
                loss: m.loss,
                accuracy: m.accuracy,
                elapsed_seconds: start.elapsed().as_secs_f64(),
            };
            on_record(&rec)?;
            history.push(rec);
        }
    }
    Ok(TrainReport { history, steps: step })
}
