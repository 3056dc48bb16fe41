//! Patch-based quantile forecaster.
//!
//! Channels are handled independently with shared weights: each channel's
//! context is standardized, cut into patches, linearly embedded and followed
//! by learned future-query tokens. The query-position states are decoded
//! into `patch_size * Q` quantile values each.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamBuilder, ParamId, ParamStore, Tape, Tensor, Var};
use crate::cot::{recur, FeedbackMlp, RecurrenceConfig, RecurrenceState};
use crate::error::{Error, Result};
use crate::nn::{Ctx, LayerNorm, Linear, Stack, StackConfig, TokenGroup, EMBED_INIT};
use crate::scalar::Scalar;

pub const QUANTILES: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

const STD_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ForecastLoss {
    #[default]
    Pinball,
    /// Mean squared error of the median track.
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecasterConfig {
    pub context_len: usize,
    pub horizon: usize,
    pub patch_size: usize,
    pub stack: StackConfig,
    pub feedback_hidden: usize,
    pub recurrence: RecurrenceConfig,
    #[serde(default)]
    pub loss: ForecastLoss,
}

impl ForecasterConfig {
    pub fn context_patches(&self) -> usize {
        self.context_len / self.patch_size
    }

    pub fn query_tokens(&self) -> usize {
        self.horizon.div_ceil(self.patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        self.stack.validate()?;
        self.recurrence.validate()?;
        if self.patch_size == 0 || self.horizon == 0 {
            return Err(Error::config("model.patch_size", "patch size and horizon must be positive"));
        }
        if self.context_len < self.patch_size {
            return Err(Error::config("model.context_len", "context shorter than one patch"));
        }
        Ok(())
    }
}

/// One forecasting instance: `context` is `[T, C]`.
#[derive(Clone, Debug)]
pub struct ForecastTask {
    pub context: Tensor<f64>,
    pub horizon: usize,
    pub patch_size: usize,
}

/// A training/evaluation window: context `[T, C]`, target `[H, C]`.
#[derive(Clone, Debug)]
pub struct Window {
    pub context: Tensor<f64>,
    pub target: Tensor<f64>,
}

/// Quantile forecast `[C, horizon, Q]` on the original scale.
#[derive(Clone, Debug)]
pub struct QuantileForecast {
    pub values: Tensor<f64>,
}

impl QuantileForecast {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn horizon(&self) -> usize {
        self.values.shape()[1]
    }

    /// `[horizon, Q]` block of channel `c`.
    pub fn channel(&self, c: usize) -> Tensor<f64> {
        let (h, q) = (self.values.shape()[1], self.values.shape()[2]);
        let d = &self.values.data()[c * h * q..(c + 1) * h * q];
        Tensor::new(vec![h, q], d.to_vec()).expect("block shape")
    }

    /// Median track of channel `c`.
    pub fn median(&self, c: usize) -> Vec<f64> {
        let block = self.channel(c);
        (0..block.shape()[0]).map(|t| block.at(&[t, 2])).collect()
    }

    /// Fraction of (channel, step) pairs whose quantiles are not monotone.
    pub fn crossing_rate(&self) -> f64 {
        let q = self.values.shape()[2];
        let rows = self.values.numel() / q;
        let crossed = self
            .values
            .data()
            .chunks(q)
            .filter(|r| r.windows(2).any(|w| w[1] < w[0]))
            .count();
        crossed as f64 / rows as f64
    }
}

/// Splits each channel of `context: [T, C]` into `floor(T / P)` patches,
/// giving `[C, T / P, P]`. When `T` is not a multiple of `P` the oldest
/// `T mod P` steps are dropped.
pub fn patchify(context: &Tensor<f64>, patch_size: usize) -> Result<Tensor<f64>> {
    if context.rank() != 2 {
        return Err(Error::Input(format!("context must be [T, C], got {:?}", context.shape())));
    }
    let (t, c) = (context.shape()[0], context.shape()[1]);
    if patch_size == 0 || t < patch_size {
        return Err(Error::Input(format!("context length {t} shorter than patch size {patch_size}")));
    }
    let n = t / patch_size;
    let skip = t - n * patch_size;
    let mut out = Vec::with_capacity(c * n * patch_size);
    for ch in 0..c {
        for step in skip..t {
            out.push(context.at(&[step, ch]));
        }
    }
    Tensor::new(vec![c, n, patch_size], out)
}

/// Per-channel (mean, std) of `[T, C]`, std floored for constant series.
pub fn channel_stats(context: &Tensor<f64>) -> Vec<(f64, f64)> {
    let (t, c) = (context.shape()[0], context.shape()[1]);
    (0..c)
        .map(|ch| {
            let col: Vec<f64> = (0..t).map(|i| context.at(&[i, ch])).collect();
            let mean = col.iter().sum::<f64>() / t as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64;
            (mean, (var + STD_FLOOR * STD_FLOOR).sqrt())
        })
        .collect()
}

fn standardize(x: &Tensor<f64>, stats: &[(f64, f64)]) -> Tensor<f64> {
    let c = x.shape()[1];
    Tensor::from_fn(x.shape(), |i| {
        let (m, s) = stats[i % c];
        (x.data()[i] - m) / s
    })
}

/// Pinball loss averaged over steps and quantile levels.
/// `values: [H, Q]`, `y: [H]`.
pub fn pinball_loss(values: &Tensor<f64>, y: &[f64], taus: &[f64]) -> Result<f64> {
    let (h, q) = (values.shape()[0], values.shape()[1]);
    if y.len() != h || taus.len() != q {
        return Err(Error::shape("pinball_loss", format!("{:?} vs {} targets, {} levels", values.shape(), y.len(), taus.len())));
    }
    let mut s = 0.0;
    for t in 0..h {
        for (k, &tau) in taus.iter().enumerate() {
            let u = y[t] - values.at(&[t, k]);
            s += if u >= 0.0 { tau * u } else { (tau - 1.0) * u };
        }
    }
    Ok(s / (h * q) as f64)
}

/// Mean squared error between the median (tau = 0.5) track and `y`.
pub fn mse_of_median(values: &Tensor<f64>, y: &[f64]) -> Result<f64> {
    let h = values.shape()[0];
    if y.len() != h || values.shape()[1] != QUANTILES.len() {
        return Err(Error::shape("mse_of_median", format!("{:?} vs {} targets", values.shape(), y.len())));
    }
    Ok((0..h).map(|t| (values.at(&[t, 2]) - y[t]).powi(2)).sum::<f64>() / h as f64)
}

/// Differentiable pinball loss: `pred [.., Q]`, `target` same shape.
pub fn pinball_var<T: Scalar>(tape: &Tape<T>, pred: Var, target: Var, taus: &[f64]) -> Result<Var> {
    let u = tape.sub(target, pred)?;
    let tau = tape.constant(Tensor::from_f64(&[taus.len()], taus)?);
    let lin = tape.mul_broadcast(u, tau)?;
    let neg = tape.relu(tape.neg(u)?)?;
    tape.mean(tape.add(lin, neg)?)
}

/// Outputs of one differentiable forward pass.
pub struct ForecastPass {
    /// Standardized quantiles `[C, H, Q]`.
    pub quantiles: Var,
    pub stats: Vec<(f64, f64)>,
    pub state: RecurrenceState,
}

#[derive(Clone, Debug)]
pub struct Forecaster<T> {
    pub cfg: ForecasterConfig,
    pub params: ParamStore<T>,
    patch_embed: Linear,
    position: ParamId,
    query_tokens: ParamId,
    pub stack: Stack,
    pub feedback: FeedbackMlp,
    norm: LayerNorm,
    head: Linear,
}

impl<T: Scalar> Forecaster<T> {
    pub fn new(cfg: ForecasterConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let e = cfg.stack.block.model_dim;
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let patch_embed = Linear::new(&mut pb.sub("patch_embed"), cfg.patch_size, e)?;
        let position = pb.param("position", &[cfg.context_patches(), e], EMBED_INIT)?;
        let query_tokens = pb.param("query_tokens", &[cfg.query_tokens(), e], EMBED_INIT)?;
        let stack = Stack::new(&mut pb.sub("stack"), &cfg.stack)?;
        let feedback = FeedbackMlp::new(&mut pb.sub("feedback"), e, cfg.feedback_hidden, cfg.recurrence.max_step_embeddings)?;
        let norm = LayerNorm::new(&mut pb.sub("norm"), e)?;
        let head = Linear::new(&mut pb.sub("head"), e, cfg.patch_size * QUANTILES.len())?;
        Ok(Forecaster { cfg, params, patch_embed, position, query_tokens, stack, feedback, norm, head })
    }

    /// Embedded base sequence `[C, Np + Nq, E]`.
    fn embed(&self, ctx: &Ctx<'_, T>, patches: &Tensor<f64>) -> Result<Var> {
        let t = ctx.tape;
        let (c, np) = (patches.shape()[0], patches.shape()[1]);
        let e = self.cfg.stack.block.model_dim;
        let x = t.constant(patches.cast());
        let tokens = self.patch_embed.forward(ctx, x)?;
        let tokens = t.add_broadcast(tokens, ctx.p(self.position))?;
        let queries = t.broadcast_to(ctx.p(self.query_tokens), &[c, self.cfg.query_tokens(), e])?;
        debug_assert_eq!(np, self.cfg.context_patches());
        t.concat(&[tokens, queries], 1)
    }

    /// Differentiable forward with `passes` recurrences.
    pub fn forward(&self, ctx: &Ctx<'_, T>, context: &Tensor<f64>, passes: usize) -> Result<ForecastPass> {
        let t = ctx.tape;
        if context.rank() != 2 || context.shape()[0] != self.cfg.context_len {
            return Err(Error::Input(format!(
                "context {:?} does not match configured length {}",
                context.shape(),
                self.cfg.context_len
            )));
        }
        let stats = channel_stats(context);
        let patches = patchify(&standardize(context, &stats), self.cfg.patch_size)?;
        let c = patches.shape()[0];
        let np = patches.shape()[1];
        let nq = self.cfg.query_tokens();
        let mut groups = vec![TokenGroup::Context; np];
        groups.extend(std::iter::repeat_n(TokenGroup::Query, nq));
        let query_index: Vec<usize> = (np..np + nq).collect();
        let base = self.embed(ctx, &patches)?;
        let (hidden, state) = recur(
            ctx,
            &mut || Ok(base),
            &groups,
            &query_index,
            &self.feedback,
            passes,
            &mut |seq, _groups| self.stack.forward(ctx, seq, None),
        )?;
        let h_q = t.index_select(hidden, 1, &query_index)?;
        let out = self.head.forward(ctx, self.norm.forward(ctx, h_q)?)?;
        let q = QUANTILES.len();
        let out = t.reshape(out, &[c, nq * self.cfg.patch_size, q])?;
        let out = if nq * self.cfg.patch_size == self.cfg.horizon {
            out
        } else {
            t.narrow(out, 1, 0, self.cfg.horizon)?
        };
        Ok(ForecastPass { quantiles: out, stats, state })
    }

    /// Training loss on one window (standardized scale).
    pub fn window_loss(&self, ctx: &Ctx<'_, T>, w: &Window, passes: usize) -> Result<Var> {
        let t = ctx.tape;
        let pass = self.forward(ctx, &w.context, passes)?;
        let (h, c) = (w.target.shape()[0], w.target.shape()[1]);
        if h != self.cfg.horizon {
            return Err(Error::shape("window_loss", format!("target horizon {h} vs {}", self.cfg.horizon)));
        }
        let q = QUANTILES.len();
        match self.cfg.loss {
            ForecastLoss::Pinball => {
                let target = Tensor::from_fn(&[c, h, q], |i| {
                    let ch = i / (h * q);
                    let step = (i / q) % h;
                    let (m, s) = pass.stats[ch];
                    T::from_f64c((w.target.at(&[step, ch]) - m) / s)
                });
                let target = t.constant(target);
                pinball_var(t, pass.quantiles, target, &QUANTILES)
            }
            ForecastLoss::Mse => {
                let median = t.reshape(pass.quantiles, &[c * h, q])?;
                let median = t.gather_last(median, &vec![2; c * h])?;
                let target = Tensor::from_fn(&[c * h], |i| {
                    let (ch, step) = (i / h, i % h);
                    let (m, s) = pass.stats[ch];
                    T::from_f64c((w.target.at(&[step, ch]) - m) / s)
                });
                let diff = t.sub(median, t.constant(target))?;
                t.mean(t.square(diff)?)
            }
        }
    }

    /// Forecast on the original scale.
    pub fn forecast(&self, task: &ForecastTask, passes: usize) -> Result<QuantileForecast> {
        if task.horizon != self.cfg.horizon || task.patch_size != self.cfg.patch_size {
            return Err(Error::Input("task horizon/patch size differ from the model configuration".into()));
        }
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &self.params);
        let pass = self.forward(&ctx, &task.context, passes)?;
        let raw = tape.tensor(pass.quantiles);
        let (c, h, q) = (raw.shape()[0], raw.shape()[1], raw.shape()[2]);
        let values = Tensor::from_fn(&[c, h, q], |i| {
            let (m, s) = pass.stats[i / (h * q)];
            raw.data()[i].to_f64c() * s + m
        });
        if !values.is_finite() {
            return Err(Error::NonFinite { op: "forecast" });
        }
        Ok(QuantileForecast { values })
    }

    pub fn forecast_window(&self, w: &Window, passes: usize) -> Result<QuantileForecast> {
        self.forecast(
            &ForecastTask { context: w.context.clone(), horizon: self.cfg.horizon, patch_size: self.cfg.patch_size },
            passes,
        )
    }
}

/// Per-window evaluation metrics on the original scale, averaged over
/// channels and windows.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForecastScores {
    pub mse_median: f64,
    pub pinball: f64,
    pub crossing_rate: f64,
}

pub fn evaluate_windows<T: Scalar>(model: &Forecaster<T>, windows: &[Window], passes: usize) -> Result<ForecastScores> {
    if windows.is_empty() {
        return Err(Error::Input("no evaluation windows".into()));
    }
    let mut acc = ForecastScores::default();
    let mut n = 0.0;
    for w in windows {
        let f = model.forecast_window(w, passes)?;
        for c in 0..f.channels() {
            let y: Vec<f64> = (0..f.horizon()).map(|t| w.target.at(&[t, c])).collect();
            let block = f.channel(c);
            acc.mse_median += mse_of_median(&block, &y)?;
            acc.pinball += pinball_loss(&block, &y, &QUANTILES)?;
            n += 1.0;
        }
        acc.crossing_rate += f.crossing_rate();
    }
    acc.mse_median /= n;
    acc.pinball /= n;
    acc.crossing_rate /= windows.len() as f64;
    Ok(acc)
}

/// Random tiny windows, used in tests and smoke runs.
pub fn random_window<R: Rng>(rng: &mut R, context_len: usize, horizon: usize, channels: usize) -> Window {
    Window {
        context: Tensor::from_fn(&[context_len, channels], |_| rng.random_range(-1.0..1.0)),
        target: Tensor::from_fn(&[horizon, channels], |_| rng.random_range(-1.0..1.0)),
    }
}
