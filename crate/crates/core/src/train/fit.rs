use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{clip_global_norm, cosine_lr, AdamW, OptimConfig};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::scalar::Scalar;

/// A validation number plus its direction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub higher_is_better: bool,
}

impl Score {
    pub fn higher(value: f64) -> Self {
        Score { value, higher_is_better: true }
    }

    pub fn lower(value: f64) -> Self {
        Score { value, higher_is_better: false }
    }

    /// Strict improvement.
    pub fn beats(&self, other: &Score) -> bool {
        if self.higher_is_better { self.value > other.value } else { self.value < other.value }
    }
}

/// Something `fit` can train.
pub trait Trainable<T: Scalar> {
    type Example;

    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    /// Mean loss over a minibatch, recorded on `ctx.tape`.
    fn batch_loss(&self, ctx: &Ctx<'_, T>, batch: &[&Self::Example]) -> Result<Var>;
    fn validate(&self, val: &[Self::Example]) -> Result<Score>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<HistoryRecord>,
    pub best_epoch: usize,
    pub best: Option<Score>,
    pub steps: usize,
}

impl History {
    pub fn epochs_run(&self) -> usize {
        self.records.len()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("history records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (step as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Epoch loop with shuffled minibatches, AdamW, cosine schedule, per-epoch
/// validation and early stopping. The best-epoch weights are restored.
pub fn fit<T: Scalar, M: Trainable<T>>(
    model: &mut M,
    train: &[M::Example],
    val: &[M::Example],
    cfg: &OptimConfig,
    seed: u64,
) -> Result<History> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    if val.is_empty() {
        return Err(Error::Input("empty validation set".into()));
    }
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut total = per_epoch * cfg.max_epochs;
    if let Some(cap) = cfg.max_steps {
        total = total.min(cap);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(model.params());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = History::default();
    let mut best_params = model.params().clone();
    let mut since_best = 0;
    let mut step = 0;
    let mut lr = cosine_lr(0, total, cfg.lr, cfg.warmup_steps);

    'epochs: for epoch in 0..cfg.max_epochs {
        if step >= total {
            break;
        }
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total {
                break;
            }
            let batch: Vec<&M::Example> = chunk.iter().map(|&i| &train[i]).collect();
            let tape = Tape::new();
            let ctx = Ctx::train(&tape, model.params(), step_seed(seed, step));
            let numeric = |e: Error| if e.is_numeric() { Error::NonFiniteLoss { epoch, step } } else { e };
            let loss = model.batch_loss(&ctx, &batch).map_err(numeric)?;
            let value = tape.value(loss).item().to_f64c();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            let grads = tape.backward(loss).map_err(numeric)?;
            let mut grads = ctx.param_grads(&grads);
            drop(ctx);
            if let Some(max) = cfg.clip_norm {
                clip_global_norm(&mut grads, max);
            }
            lr = cosine_lr(step, total, cfg.lr, cfg.warmup_steps);
            opt.step(model.params_mut(), &grads, cfg, lr)?;
            loss_sum += value;
            batches += 1;
            step += 1;
        }
        let score = model.validate(val)?;
        if !score.value.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, step });
        }
        history.records.push(HistoryRecord {
            step,
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            val_metric: score.value,
            lr,
        });
        match history.best {
            Some(best) if !score.beats(&best) => {
                since_best += 1;
                if since_best >= cfg.patience {
                    break 'epochs;
                }
            }
            _ => {
                history.best = Some(score);
                history.best_epoch = epoch;
                best_params = model.params().clone();
                since_best = 0;
            }
        }
    }
    model.params_mut().copy_from(&best_params)?;
    history.steps = step;
    Ok(history)
}
