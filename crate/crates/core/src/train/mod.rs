//! Optimizer, learning-rate schedule, clipping and the epoch loop.

mod fit;
mod optim;

pub use fit::{fit, History, HistoryRecord, Score, Trainable};
pub use optim::{clip_global_norm, cosine_lr, global_norm, AdamW, OptimConfig};
