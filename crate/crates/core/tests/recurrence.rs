//! Zero-pass equivalence with the plain forward, and sequence growth per pass.

#[macro_use]
mod common;

use common::*;
use latentloop::autodiff::{ParamBuilder, ParamStore, Tape, Tensor};
use latentloop::cot::{recur, FeedbackMlp, RecurrenceConfig};
use latentloop::nn::{Ctx, TokenGroup};
use latentloop::pfn::PfnModel;
use latentloop::tabular::{StageCache, TabularModel, TaskKind};
use latentloop::ts::Forecaster;
use proptest::prelude::*;
use proptest::test_runner::TestRunner;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Overwrites every recurrence-only parameter with NaN.
fn poison(params: &mut ParamStore<f64>, recurrence_only: &[&str]) {
    let ids: Vec<_> = params
        .iter()
        .filter(|(_, p)| recurrence_only.iter().any(|pre| p.name.starts_with(pre)))
        .map(|(id, _)| id)
        .collect();
    assert!(!ids.is_empty());
    for id in ids {
        let shape = params.value(id).shape().to_vec();
        *params.value_mut(id) = Tensor::full(&shape, f64::NAN);
    }
}

fn same_bits(a: &Tensor<f64>, b: &Tensor<f64>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

pub fn forecaster_zero_passes_is_plain_forward() {
    let mut cot_cfg = ts_config(2);
    cot_cfg.recurrence = RecurrenceConfig { r_train: 2, r_eval: 2, max_step_embeddings: 2 };
    let mut base_cfg = cot_cfg.clone();
    base_cfg.recurrence = RecurrenceConfig { r_train: 0, r_eval: 0, max_step_embeddings: 2 };
    let mut cot = Forecaster::<f64>::new(cot_cfg.clone(), 21).unwrap();
    let mut base = Forecaster::<f64>::new(base_cfg, 99).unwrap();
    base.params.copy_from(&cot.params).unwrap();
    poison(&mut cot.params, &["feedback."]);
    let w = window(1, &cot_cfg, 3);
    let run = |m: &Forecaster<f64>| {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &m.params);
        let pass = m.forward(&ctx, &w.context, 0).unwrap();
        tape.tensor(pass.quantiles)
    };
    let (a, b) = (run(&cot), run(&base));
    assert!(a.is_finite());
    assert!(same_bits(&a, &b));
}

pub fn tabular_zero_passes_is_plain_forward() {
    for kind in [TaskKind::Classification { n_classes: 3 }, TaskKind::Regression] {
        let mut cot_cfg = tab_config(kind, 3);
        cot_cfg.recurrence.max_step_embeddings = 3;
        let mut base_cfg = cot_cfg.clone();
        base_cfg.recurrence = RecurrenceConfig { r_train: 0, r_eval: 0, max_step_embeddings: 3 };
        let mut cot = TabularModel::<f64>::new(cot_cfg, 5).unwrap();
        let mut base = TabularModel::<f64>::new(base_cfg, 6).unwrap();
        base.params.copy_from(&cot.params).unwrap();
        poison(&mut cot.params, &["feedback."]);
        let mut task = class_task(2, 6, 3, 4, 3);
        if kind == TaskKind::Regression {
            task.kind = kind;
        }
        let run = |m: &TabularModel<f64>| {
            let tape = Tape::new();
            let ctx = Ctx::eval(&tape, &m.params);
            let pass = m.icl_predict(&ctx, &task, 0, StageCache::Reuse).unwrap();
            tape.tensor(pass.output)
        };
        let (a, b) = (run(&cot), run(&base));
        assert!(a.is_finite());
        assert!(same_bits(&a, &b));
    }
}

pub fn pfn_zero_passes_is_plain_forward() {
    let mut cot = PfnModel::<f64>::new(pfn_config(2), 8).unwrap();
    let mut base = PfnModel::<f64>::new(pfn_config(0), 9).unwrap();
    base.params.copy_from(&cot.params).unwrap();
    poison(&mut cot.params, &["feedback.", "marker", "gate"]);
    let task = class_task(4, 5, 2, 3, 3);
    let run = |m: &PfnModel<f64>| {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &m.params);
        let pass = m.forward(&ctx, &task, 0).unwrap();
        (tape.tensor(pass.logits), tape.tensor(pass.h_out), tape.tensor(pass.h0))
    };
    let (a, b) = (run(&cot), run(&base));
    assert!(a.0.is_finite());
    assert!(same_bits(&a.0, &b.0));
    assert!(same_bits(&a.1, &a.2), "h_out must be h0 when no pass runs");
}

pub fn stage_cache_matches_recompute() {
    let kind = TaskKind::Classification { n_classes: 3 };
    let m = TabularModel::<f64>::new(tab_config(kind, 2), 4).unwrap();
    let task = class_task(7, 5, 3, 3, 3);
    let run = |cache| {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &m.params);
        let pass = m.icl_predict(&ctx, &task, 2, cache).unwrap();
        tape.tensor(pass.output)
    };
    assert!(same_bits(&run(StageCache::Reuse), &run(StageCache::Recompute)));
}

/// Randomized over (S0, n_q, passes): the hidden length is `S0 + r * n_q`
/// at every pass `r`.
pub fn length_grows_by_query_count_per_pass() {
    let mut runner = TestRunner::new(ProptestConfig { cases: 64, ..ProptestConfig::default() });
    let strategy = (1usize..12, 0.0f64..1.0, 0usize..6, 0u64..1000);
    runner
        .run(&strategy, |(s0, nq_frac, passes, seed)| {
            let nq = 1 + ((s0 - 1) as f64 * nq_frac) as usize;
            let e = 4;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::<f64>::new();
            let fb = FeedbackMlp::new(&mut ParamBuilder::new(&mut store, &mut rng), e, 6, 2).unwrap();
            let tape = Tape::new();
            let ctx = Ctx::eval(&tape, &store);
            let mut groups = vec![TokenGroup::Context; s0 - nq];
            groups.extend(std::iter::repeat_n(TokenGroup::Query, nq));
            let query: Vec<usize> = (s0 - nq..s0).collect();
            let base = tape.constant(Tensor::from_fn(&[2, s0, e], |i| (i as f64 * 0.37).sin()));
            let mut seen = Vec::new();
            let (hidden, state) = recur(&ctx, &mut || Ok(base), &groups, &query, &fb, passes, &mut |seq, g| {
                let len = tape.shape(seq)[1];
                seen.push((len, g.len()));
                Ok(seq)
            })
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
            let expected: Vec<usize> = (0..=passes).map(|r| s0 + r * nq).collect();
            prop_assert_eq!(seen, expected.iter().map(|&l| (l, l)).collect::<Vec<_>>());
            prop_assert_eq!(&state.pass_lengths, &expected);
            prop_assert_eq!(tape.shape(hidden), vec![2, s0 + passes * nq, e]);
            prop_assert!(state.query_index_per_pass.iter().all(|q| q == &query));
            Ok(())
        })
        .unwrap();
}

pub fn model_pass_lengths_follow_the_law() {
    let cfg = ts_config(3);
    let (np, nq) = (cfg.context_patches(), cfg.query_tokens());
    let w = window(2, &cfg, 1);
    let m = Forecaster::<f64>::new(cfg, 1).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &m.params);
    let pass = m.forward(&ctx, &w.context, 3).unwrap();
    assert_eq!(pass.state.pass_lengths, (0..=3).map(|r| np + nq + r * nq).collect::<Vec<_>>());

    let m = PfnModel::<f64>::new(pfn_config(4), 2).unwrap();
    let task = class_task(1, 4, 3, 2, 3);
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &m.params);
    let pass = m.forward(&ctx, &task, 4).unwrap();
    assert_eq!(pass.pass_rows, (0..=4).map(|r| 7 + r * 3).collect::<Vec<_>>());
}

tests!(forecaster_zero_passes_is_plain_forward, tabular_zero_passes_is_plain_forward, pfn_zero_passes_is_plain_forward, stage_cache_matches_recompute, length_grows_by_query_count_per_pass, model_pass_lengths_follow_the_law);
