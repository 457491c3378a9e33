use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::scalar::Scalar;

/// Decoupled-weight-decay Adam. Moments are kept in f64.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        Self { lr, betas, eps, weight_decay, step: 0, first: Vec::new(), second: Vec::new() }
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update over parallel lists of parameter and gradient buffers.
    pub fn step_slices<T: Scalar>(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::input("parameter and gradient lists differ in length"));
        }
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::numeric("non-finite gradient; step aborted"));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for i in 0..p.len() {
                let gi = g[i].as_f64();
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                let w = p[i].as_f64() * decay - self.lr * m_hat / (v_hat.sqrt() + self.eps);
                p[i] = T::lit(w);
            }
        }
        Ok(())
    }

    pub fn step<T: Scalar>(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>) -> Result<()> {
        let mut ps: Vec<&mut [T]> = params.tensors_mut().into_iter().map(|(_, m)| m.as_mut_slice()).collect();
        let gs: Vec<&[T]> = grads.tensors().into_iter().map(|(_, m)| m.as_slice()).collect();
        self.step_slices(&mut ps, &gs)
    }
}

/// Global L2 norm of all gradient entries, accumulated in f64.
pub fn global_norm<T: Scalar>(grads: &ModelParams<T>) -> f64 {
    grads.tensors().iter().map(|(_, m)| m.sum_sq_f64()).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut ModelParams<T>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for (_, m) in grads.tensors_mut() {
            m.scale(s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: u32,
    /// Relative improvement required to reset the plateau counter.
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self { factor: 0.9, patience: 0, threshold: 0.0025, min_lr: 1e-6 }
    }
}

impl PlateauConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::config("plateau.factor must be in (0, 1)"));
        }
        if !(self.min_lr > 0.0) {
            return Err(Error::config("plateau.min_lr must be positive"));
        }
        if !(self.threshold >= 0.0 && self.threshold < 1.0) {
            return Err(Error::config("plateau.threshold must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Reduce-on-plateau learning-rate schedule in `min` mode with a relative
/// threshold.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    pub cfg: PlateauConfig,
    pub lr: f64,
    pub best_so_far: f64,
    bad_epochs: u32,
}

impl PlateauSchedule {
    pub fn new(cfg: PlateauConfig, lr: f64) -> Self {
        Self { cfg, lr, best_so_far: f64::INFINITY, bad_epochs: 0 }
    }

    /// Feeds one validation loss and returns the (possibly reduced) rate.
    pub fn step(&mut self, val_loss: f64) -> Result<f64> {
        if !val_loss.is_finite() {
            return Err(Error::numeric("non-finite validation loss"));
        }
        if val_loss > self.best_so_far * (1.0 - self.cfg.threshold) {
            self.bad_epochs += 1;
        } else {
            self.best_so_far = val_loss;
            self.bad_epochs = 0;
        }
        if self.bad_epochs > self.cfg.patience {
            self.lr = (self.lr * self.cfg.factor).max(self.cfg.min_lr);
            self.bad_epochs = 0;
        }
        Ok(self.lr)
    }
}
