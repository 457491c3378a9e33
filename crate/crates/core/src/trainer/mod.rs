//! Minibatch training of the tokenizer.

pub mod gradcheck;
mod optim;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use optim::{clip_grad_norm, global_norm, AdamW, PlateauConfig, PlateauSchedule};

use crate::bsq::BsqConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, QuantMode};
use crate::scalar::Scalar;
use crate::seed::derive_seed;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip_max_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Share of utterances held out for validation.
    pub val_fraction: f64,
    pub plateau: PlateauConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            betas: (0.9, 0.98),
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip_max_norm: 5.0,
            batch_size: 4,
            epochs: 10,
            seed: 0,
            val_fraction: 0.1,
            plateau: PlateauConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr must be positive"));
        }
        for b in [self.betas.0, self.betas.1] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config("train.betas must lie in [0, 1)"));
            }
        }
        if !(self.grad_clip_max_norm > 0.0) {
            return Err(Error::config("train.grad_clip_max_norm must be positive"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.eps must be positive and train.weight_decay nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("train.val_fraction must lie in [0, 1)"));
        }
        self.plateau.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Parameters of the epoch with the lowest validation loss (epoch 0 is
    /// the initialization).
    pub best: ModelParams<T>,
    pub best_epoch: usize,
    pub last: ModelParams<T>,
    /// Row 0 evaluates the initialization; row `e` follows epoch `e`.
    pub trace: Vec<EpochRecord>,
}

/// Cuts utterances into non-overlapping chunks of exactly `frames` rows;
/// incomplete tails are dropped.
pub fn exact_chunks<T: Scalar>(utterances: &[Matrix<T>], frames: usize) -> Vec<Matrix<T>> {
    utterances
        .iter()
        .flat_map(|u| (0..u.rows() / frames).map(move |c| u.slice_rows(c * frames, (c + 1) * frames)))
        .collect()
}

/// Deterministic train/validation split of `n` items.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let n_val = if n >= 2 && val_fraction > 0.0 { ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1) } else { 0 };
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5911)));
    let mut val: Vec<usize> = order[..n_val].to_vec();
    let mut train: Vec<usize> = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Mean hard-quantized objective over a set of chunks.
pub fn evaluate<T: Scalar>(params: &ModelParams<T>, data: &[Matrix<T>], model: &ModelConfig, bsq: &BsqConfig) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::input("cannot evaluate on an empty set"));
    }
    let losses = data
        .par_iter()
        .map(|f| params.loss(f, model, bsq, QuantMode::Hard).map(|l| l.total))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Averaged gradient of one minibatch. Per-sample passes run in parallel;
/// the reduction is sequential in batch order.
pub fn batch_gradient<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[&Matrix<T>],
    model: &ModelConfig,
    bsq: &BsqConfig,
) -> Result<(f64, ModelParams<T>)> {
    let parts = batch
        .par_iter()
        .map(|f| params.loss_and_grad(f, model, bsq, QuantMode::Hard))
        .collect::<Result<Vec<_>>>()?;
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l.total;
        total.add_assign(g);
    }
    let inv = T::lit(1.0 / batch.len() as f64);
    for (_, m) in total.tensors_mut() {
        m.scale(inv);
    }
    Ok((loss / batch.len() as f64, total))
}

/// Trains from a seeded initialization. `val` may be empty, in which case
/// the training loss drives the schedule and best-checkpoint selection.
pub fn fit<T: Scalar>(
    train: &[Matrix<T>],
    val: &[Matrix<T>],
    model: &ModelConfig,
    bsq: &BsqConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    let mut params = ModelParams::<T>::init(model, bsq, cfg.seed)?;
    let monitor = |p: &ModelParams<T>| -> Result<(f64, f64)> {
        let t = evaluate(p, train, model, bsq)?;
        let v = if val.is_empty() { t } else { evaluate(p, val, model, bsq)? };
        Ok((t, v))
    };

    let (t0, v0) = monitor(&params)?;
    if !t0.is_finite() || !v0.is_finite() {
        return Err(Error::numeric("non-finite loss at initialization"));
    }
    let mut trace = vec![EpochRecord { epoch: 0, train_loss: t0, val_loss: v0, lr: cfg.lr }];
    let mut best = params.clone();
    let mut best_val = v0;
    let mut best_epoch = 0;

    let mut opt = AdamW::new(cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay);
    let mut schedule = PlateauSchedule::new(cfg.plateau.clone(), cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        for batch_idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Matrix<T>> = batch_idx.iter().map(|&i| &train[i]).collect();
            let (loss, mut grad) = batch_gradient(&params, &batch, model, bsq).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}: {m}")),
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::numeric(format!("epoch {epoch}: non-finite batch loss")));
            }
            clip_grad_norm(&mut grad, cfg.grad_clip_max_norm);
            opt.step(&mut params, &grad)?;
        }
        let (t, v) = monitor(&params)?;
        if !t.is_finite() || !v.is_finite() {
            return Err(Error::numeric(format!("epoch {epoch}: non-finite evaluation loss (trace: {trace:?})")));
        }
        if v < best_val {
            best_val = v;
            best = params.clone();
            best_epoch = epoch;
        }
        opt.lr = schedule.step(v)?;
        trace.push(EpochRecord { epoch, train_loss: t, val_loss: v, lr: opt.lr });
    }
    Ok(TrainOutcome { best, best_epoch, last: params, trace })
}

/// CSV with header `epoch,train_loss,val_loss,lr`.
pub fn write_loss_trace(path: &Path, trace: &[EpochRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch,train_loss,val_loss,lr")?;
    for r in trace {
        writeln!(w, "{},{:e},{:e},{:e}", r.epoch, r.train_loss, r.val_loss, r.lr)?;
    }
    w.flush()?;
    Ok(())
}
