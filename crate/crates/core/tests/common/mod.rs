#![allow(dead_code, unused_macros)]

/// Registers plain check functions as tests. The acceptance runner calls
/// the same functions directly.
macro_rules! tests {
    ($($name:ident),* $(,)?) => {
        mod run {
            $(
                #[test]
                fn $name() {
                    super::$name()
                }
            )*
        }
    };
}

use latentloop::autodiff::{ParamStore, Tape, Tensor, Var};
use latentloop::cot::RecurrenceConfig;
use latentloop::nn::{BlockConfig, Ctx, StackConfig, StackKind};
use latentloop::pfn::PfnConfig;
use latentloop::tabular::{TabularConfig, TabularTask, TaskKind};
use latentloop::ts::{ForecastLoss, ForecasterConfig, Window};
use latentloop::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn block(e: usize) -> BlockConfig {
    BlockConfig { model_dim: e, n_heads: 2, ffn_dim: 2 * e, dropout_p: 0.0 }
}

pub fn ts_config(r: usize) -> ForecasterConfig {
    ForecasterConfig {
        context_len: 16,
        horizon: 6,
        patch_size: 4,
        stack: StackConfig { kind: StackKind::Plain { layers: 1 }, block: block(8) },
        feedback_hidden: 8,
        recurrence: RecurrenceConfig::new(r, r),
        loss: ForecastLoss::Pinball,
    }
}

pub fn tab_config(kind: TaskKind, r: usize) -> TabularConfig {
    TabularConfig {
        task: kind,
        max_features: 4,
        cell_block: block(8),
        icl: StackConfig { kind: StackKind::Plain { layers: 1 }, block: block(8) },
        feedback_hidden: 8,
        recurrence: RecurrenceConfig::new(r, r),
    }
}

pub fn pfn_config(r: usize) -> PfnConfig {
    PfnConfig {
        block: block(8),
        stack: StackKind::Plain { layers: 1 },
        n_classes: 3,
        feedback_hidden: 8,
        decoder_hidden: 8,
        r_train: r,
        r_eval: Some(r),
    }
}

pub fn window(seed: u64, cfg: &ForecasterConfig, channels: usize) -> Window {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut series = |n: usize| Tensor::from_fn(&[n, channels], |_| rng.random_range(-2.0..2.0));
    Window { context: series(cfg.context_len), target: series(cfg.horizon) }
}

pub fn class_task(seed: u64, nc: usize, nq: usize, d: usize, classes: usize) -> TabularTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = |n: usize| Tensor::from_fn(&[n, d], |_| rng.random_range(-1.5..1.5));
    let (x_context, x_query) = (x(nc), x(nq));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    // every class appears in the context
    let y_context = (0..nc).map(|i| if i < classes { i as f64 } else { rng.random_range(0..classes) as f64 }).collect();
    let y_query = (0..nq).map(|_| rng.random_range(0..classes) as f64).collect();
    TabularTask { x_context, y_context, x_query, y_query, kind: TaskKind::Classification { n_classes: classes } }
}

/// Denominator floor of the parameter checks. Attention key biases have an
/// exactly zero gradient (softmax is shift invariant); their central
/// differences are pure roundoff, about 1e-11 on unit-scale losses.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Worst relative error between backward() parameter gradients and
/// central differences of `loss` over every parameter element.
pub fn param_grad_check(params: &ParamStore<f64>, h: f64, loss: impl Fn(&Ctx<'_, f64>) -> Result<Var>) -> Result<f64> {
    let value = |store: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, store);
        let l = loss(&ctx)?;
        let v = tape.value(l).item();
        Ok(v)
    };
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, params);
    let l = loss(&ctx)?;
    let grads = tape.backward(l)?;
    let analytic = ctx.param_grads(&grads);

    let mut probe = params.clone();
    let mut worst = 0.0f64;
    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    for (id, grad) in ids.into_iter().zip(&analytic) {
        for i in 0..grad.numel() {
            let orig = probe.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = orig + h;
            let fp = value(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig - h;
            let fm = value(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig;
            let (a, n) = (grad.data()[i], (fp - fm) / (2.0 * h));
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR));
        }
    }
    Ok(worst)
}
