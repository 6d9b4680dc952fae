//! Mini-batch training with Adam, per-epoch validation, and best-model
//! retention.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::memory::MemoryBank;
use crate::model::{teacher_forcing, Mode, Model};
use crate::moe::LoadStats;
use crate::params::{Adam, ParamStore};
use crate::rng;
use crate::tensor::{self, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Stop once the evaluation-mode training NLL falls below this value.
    pub target_nll: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            learning_rate: 1e-4,
            weight_decay: 5e-5,
            target_nll: None,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

/// A case as seen by the trainer.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub patches: Matrix,
    pub report: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub nll: f64,
    pub aux: f64,
    pub total: f64,
    pub lr: f64,
    /// Token-weighted expert usage per mixture layer.
    pub f_usage: Vec<Vec<f64>>,
    pub p_mean: Vec<Vec<f64>>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_nll: Option<f64>,
    pub train_nll: Option<f64>,
}

pub struct TrainOutcome {
    /// Parameters with the lowest validation NLL, or the final ones when
    /// there is no validation split.
    pub best: ParamStore,
    pub best_epoch: usize,
    pub last: ParamStore,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Seed of the training-mode randomness for one case in one step.
fn case_seed(root: u64, step: usize, slot: usize) -> u64 {
    root.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((step as u64) << 20) ^ slot as u64
}

/// Mean evaluation-mode NLL per token over `examples`.
pub fn evaluate_nll(model: &Model, examples: &[Example], bank: &MemoryBank) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for ex in examples {
        let mut g = Graph::inference();
        let loss = model.case_loss(&mut g, &ex.patches, bank, &ex.report, &mut Mode::Eval)?;
        total += g.scalar(loss.nll) * loss.tokens as f64;
        tokens += loss.tokens;
    }
    if tokens == 0 {
        return Err(Error::Empty("no examples to evaluate".into()));
    }
    Ok(total / tokens as f64)
}

/// Token-weighted evaluation-mode expert usage per mixture layer.
pub fn usage_stats(model: &Model, examples: &[Example], bank: &MemoryBank) -> Result<Vec<LoadStats>> {
    let mut acc: Vec<LoadStats> = Vec::new();
    let mut tokens = 0usize;
    for ex in examples {
        let (inputs, _) = teacher_forcing(&ex.report);
        let mut g = Graph::inference();
        let (_, dec) = model.forward(&mut g, &ex.patches, bank, &inputs, &mut Mode::Eval)?;
        accumulate(&mut acc, &dec.stats, inputs.len());
        tokens += inputs.len();
    }
    Ok(normalize(acc, tokens))
}

fn accumulate(acc: &mut Vec<LoadStats>, stats: &[LoadStats], weight: usize) {
    if acc.is_empty() {
        acc.extend(stats.iter().map(|s| LoadStats {
            f_usage: vec![0.0; s.f_usage.len()],
            p_mean: vec![0.0; s.p_mean.len()],
        }));
    }
    for (a, s) in acc.iter_mut().zip(stats) {
        for (x, y) in a.f_usage.iter_mut().zip(&s.f_usage) {
            *x += y * weight as f64;
        }
        for (x, y) in a.p_mean.iter_mut().zip(&s.p_mean) {
            *x += y * weight as f64;
        }
    }
}

fn normalize(mut acc: Vec<LoadStats>, tokens: usize) -> Vec<LoadStats> {
    for a in &mut acc {
        for x in a.f_usage.iter_mut().chain(a.p_mean.iter_mut()) {
            *x /= tokens as f64;
        }
    }
    acc
}

/// Population variance of a usage vector.
pub fn usage_variance(f: &[f64]) -> f64 {
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    f.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / f.len() as f64
}

/// One optimization step over `batch`; returns the record for logging.
/// Case gradients are averaged in batch order.
fn train_step(
    model: &mut Model,
    opt: &mut Adam,
    batch: &[&Example],
    bank: &MemoryBank,
    step: usize,
    epoch: usize,
    seed: u64,
) -> Result<StepRecord> {
    let started = Instant::now();
    let mut grads: Vec<Option<Matrix>> = vec![None; model.store.len()];
    let (mut nll, mut aux, mut total) = (0.0, 0.0, 0.0);
    let mut stats = Vec::new();
    let mut tokens = 0usize;
    let scale = 1.0 / batch.len() as f64;
    for (slot, ex) in batch.iter().enumerate() {
        let mut g = Graph::new();
        let mut mode = Mode::train(case_seed(seed, step, slot));
        let loss = model.case_loss(&mut g, &ex.patches, bank, &ex.report, &mut mode)?;
        let value = g.scalar(loss.total);
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        total += value * scale;
        nll += g.scalar(loss.nll) * scale;
        if !loss.aux.is_empty() {
            aux += loss.aux.iter().map(|&a| g.scalar(a)).sum::<f64>() / loss.aux.len() as f64 * scale;
        }
        accumulate(&mut stats, &loss.stats, loss.tokens);
        tokens += loss.tokens;
        for (id, mut m) in g.backward(loss.total).into_param_grads() {
            m.scale_assign(scale);
            match &mut grads[id.index()] {
                Some(acc) => acc.add_assign(&m),
                slot => *slot = Some(m),
            }
        }
    }
    if grads.iter().flatten().any(|m| !m.is_finite()) {
        return Err(Error::Diverged { step, loss: f64::NAN });
    }
    opt.step(&mut model.store, &grads);
    let stats = normalize(stats, tokens);
    Ok(StepRecord {
        step,
        epoch,
        nll,
        aux,
        total,
        lr: opt.lr,
        f_usage: stats.iter().map(|s| s.f_usage.clone()).collect(),
        p_mean: stats.iter().map(|s| s.p_mean.clone()).collect(),
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Trains `model` in place. `on_step` sees every step record as it is
/// produced; `on_epoch` sees every epoch summary.
pub fn train(
    model: &mut Model,
    config: &TrainConfig,
    train_set: &[Example],
    val_set: &[Example],
    bank: &MemoryBank,
    mut on_step: impl FnMut(&StepRecord),
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training split is empty".into()));
    }
    let mut opt = Adam::new(&model.store, config.learning_rate, config.weight_decay);
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..config.epochs {
        let mut shuffle = rng::stream(config.seed, &format!("shuffle.{epoch}"));
        order.sort_unstable();
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let record = train_step(model, &mut opt, &batch, bank, step, epoch, config.seed)?;
            epoch_loss += record.total;
            epoch_steps += 1;
            on_step(&record);
            steps.push(record);
            step += 1;
        }
        let val_nll = if val_set.is_empty() {
            None
        } else {
            Some(evaluate_nll(model, val_set, bank)?)
        };
        let train_nll = match config.target_nll {
            Some(_) => Some(evaluate_nll(model, train_set, bank)?),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            steps: epoch_steps,
            train_loss: epoch_loss / epoch_steps as f64,
            val_nll,
            train_nll,
        };
        on_epoch(&record);
        epochs.push(record);
        if let Some(v) = val_nll {
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, epoch, model.store.clone()));
            }
        }
        if let (Some(target), Some(t)) = (config.target_nll, train_nll) {
            if t < target {
                break;
            }
        }
    }
    let last = model.store.clone();
    let last_epoch = epochs.len() - 1;
    let (best_epoch, best) = match best {
        Some((_, e, s)) => (e, s),
        None => (last_epoch, last.clone()),
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        last,
        steps,
        epochs,
    })
}

/// Mean of per-layer usage variances.
pub fn mean_usage_variance(stats: &[LoadStats]) -> f64 {
    if stats.is_empty() {
        return 0.0;
    }
    stats.iter().map(|s| usage_variance(&s.f_usage)).sum::<f64>() / stats.len() as f64
}

/// Largest single-expert usage across layers.
pub fn max_usage(stats: &[LoadStats]) -> f64 {
    stats
        .iter()
        .flat_map(|s| s.f_usage.iter().copied())
        .fold(0.0, f64::max)
}

/// Euclidean distance between two parameter stores of equal layout.
pub fn parameter_delta(a: &ParamStore, b: &ParamStore, names: impl Fn(&str) -> bool) -> f64 {
    a.iter()
        .zip(b.iter())
        .filter(|((_, n, _), _)| names(n))
        .map(|((_, _, x), (_, _, y))| {
            let d: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
            tensor::dot(&d, &d)
        })
        .sum::<f64>()
        .sqrt()
}
