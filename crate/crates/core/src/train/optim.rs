use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: Option<f64>,
    pub warmup_steps: Option<usize>,
    /// Caps the number of optimizer steps regardless of epochs.
    pub max_steps: Option<usize>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 3e-4,
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            batch_size: 128,
            max_epochs: 100,
            patience: 10,
            clip_norm: None,
            warmup_steps: None,
            max_steps: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("optim.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return Err(Error::config("optim.betas", "each beta must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("optim.weight_decay", "must be non-negative"));
        }
        if self.eps <= 0.0 {
            return Err(Error::config("optim.eps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("optim.batch_size", "must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("optim.max_epochs", "must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::config("optim.patience", "must be at least 1"));
        }
        if matches!(self.clip_norm, Some(c) if c <= 0.0) {
            return Err(Error::config("optim.clip_norm", "must be positive"));
        }
        if self.max_steps == Some(0) {
            return Err(Error::config("optim.max_steps", "must be positive"));
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then half-cosine decay to zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup: Option<usize>) -> f64 {
    let warmup = warmup.unwrap_or(0).min(total_steps);
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    let span = total_steps - warmup;
    if span == 0 {
        return base_lr;
    }
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads.iter().map(|g| g.data().iter().map(|v| v.to_f64c().powi(2)).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        // multiply then divide: one rounding per element instead of two
        let (max, n) = (T::from_f64c(max_norm), T::from_f64c(norm));
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * max / n);
        }
    }
    norm
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        AdamW { step: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], cfg: &OptimConfig, lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::shape("adamw_step", format!("{} grads for {} parameters", grads.len(), self.m.len())));
        }
        for ((_, p), g) in params.iter().zip(grads) {
            if g.shape() != p.value.shape() {
                return Err(Error::shape("adamw_step", format!("grad {:?} for {} {:?}", g.shape(), p.name, p.value.shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient { name: p.name.clone() });
            }
        }
        self.step += 1;
        let (b1, b2) = cfg.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (lr_t, decay) = (T::from_f64c(lr), T::from_f64c(1.0 - lr * cfg.weight_decay));
        let (b1t, b2t) = (T::from_f64c(b1), T::from_f64c(b2));
        let (one_b1, one_b2) = (T::from_f64c(1.0 - b1), T::from_f64c(1.0 - b2));
        let (bc1, bc2, eps) = (T::from_f64c(bc1), T::from_f64c(bc2), T::from_f64c(cfg.eps));
        let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
        for (i, (g, id)) in grads.iter().zip(ids).enumerate() {
            let p = params.value_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                p[k] *= decay;
                m[k] = b1t * m[k] + one_b1 * gk;
                v[k] = b2t * v[k] + one_b2 * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= lr_t * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
