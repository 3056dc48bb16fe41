//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Built with `harness = false` so the lines are always printed. The process
//! fails only on gating criteria; the k-hop comparison is an empirical
//! outcome and is reported without failing the build.

#[allow(dead_code)]
#[path = "model_gradients.rs"]
mod model_gradients;
#[allow(dead_code)]
#[path = "primitives.rs"]
mod primitives;
#[allow(dead_code)]
#[path = "recurrence.rs"]
mod recurrence;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use latentloop::autodiff::Tensor;
use latentloop::data::{gen_synthetic_tabular, read_records, write_records, AggregateOptions, MethodId, MetricName, MetricRecord, TabFamily, TabGenParams};
use latentloop::harness::{prepare, run_report, run_sweep, train_and_evaluate, Examples, Prepared, RunConfig};
use latentloop::ts::Window;

type Check = fn() -> Result<String, String>;

/// Runs test-style functions that signal failure by panicking.
fn all(fs: &[fn()]) -> Result<String, String> {
    for f in fs {
        f();
    }
    Ok(format!("{} checks", fs.len()))
}

fn gradients() -> Result<String, String> {
    let worst = primitives::worst_errors();
    let (name, err) = worst.iter().copied().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    if err >= primitives::TOL {
        return Err(format!("{name}: {err:.2e}"));
    }
    all(&[
        model_gradients::forecaster_with_one_recurrence,
        model_gradients::tabular_classifier_with_one_recurrence,
        model_gradients::tabular_regressor_with_one_recurrence,
        model_gradients::pfn_with_one_recurrence,
    ])?;
    Ok(format!("{} ops, worst {err:.1e} ({name}); 4 models < 1e-4", worst.len()))
}

fn zero_passes() -> Result<String, String> {
    all(&[
        recurrence::forecaster_zero_passes_is_plain_forward,
        recurrence::tabular_zero_passes_is_plain_forward,
        recurrence::pfn_zero_passes_is_plain_forward,
        recurrence::stage_cache_matches_recompute,
    ])
}

fn length_law() -> Result<String, String> {
    all(&[recurrence::length_grows_by_query_count_per_pass, recurrence::model_pass_lengths_follow_the_law])
}

fn mask_soundness() -> Result<String, String> {
    all(&[
        attention::group_rule_matches_hand_table,
        attention::pfn_six_rows_every_layer_and_head,
        attention::tabular_eight_rows_every_layer_and_head,
    ])
}

fn gate_algebra() -> Result<String, String> {
    all(&[attention::gated_combine_is_the_affine_identity, attention::initial_gate_is_tanh_of_two])
}

fn looped_stack() -> Result<String, String> {
    all(&[attention::looped_one_block_four_times, attention::looped_once_equals_plain])
}

fn loss_oracles() -> Result<String, String> {
    all(&[
        oracles::pinball_matches_brute_force,
        oracles::cross_entropy_matches_brute_force,
        oracles::rmse_matches_brute_force,
        oracles::median_mse_matches_brute_force,
        oracles::auc_matches_pairwise_count,
    ])
}

fn optimizer() -> Result<String, String> {
    all(&[oracles::adamw_matches_scalar_reference, oracles::clip_three_four_to_unit_norm])
}

fn aggregation() -> Result<String, String> {
    all(&[
        aggregate::hand_computed_report,
        aggregate::dropped_cell_is_reported_by_name,
        aggregate::duplicate_record_is_rejected,
    ])
}

fn config(json: &str) -> Result<RunConfig, String> {
    RunConfig::from_json(json).map_err(|e| e.to_string())
}

fn metric(m: &[(MetricName, f64)], name: MetricName) -> f64 {
    m.iter().find(|(n, _)| *n == name).map(|(_, v)| *v).unwrap_or(f64::NAN)
}

const TS_OVERFIT: &str = r#"{
  "model": {"family": "ts", "context_len": 64, "horizon": 16, "patch_size": 8,
    "stack": {"kind": "plain", "layers": 1, "block": {"model_dim": 32, "n_heads": 4, "ffn_dim": 64, "dropout_p": 0.0}},
    "feedback_hidden": 32, "recurrence": {"r_train": 0, "r_eval": 0, "max_step_embeddings": 1}, "loss": "pinball"},
  "optim": {"lr": 0.003, "weight_decay": 0.0, "batch_size": 8, "max_epochs": 125, "max_steps": 500, "warmup_steps": 20, "patience": 1000},
  "data": {"name": "overfit", "source": {"type": "synthetic_ts", "generator": {"family": "sinusoid", "periods": [16.0], "amplitudes": [1.0], "ar_coef": 0.0, "noise_std": 0.0, "length": 200, "channels": 1}}},
  "seeds": [0]}"#;

const TAB_OVERFIT: &str = r#"{
  "model": {"family": "tabular", "task": {"kind": "classification", "n_classes": 2}, "max_features": 4,
    "cell_block": {"model_dim": 32, "n_heads": 4, "ffn_dim": 64, "dropout_p": 0.0},
    "icl": {"kind": "plain", "layers": 1, "block": {"model_dim": 32, "n_heads": 4, "ffn_dim": 64, "dropout_p": 0.0}},
    "feedback_hidden": 32, "recurrence": {"r_train": 0, "r_eval": 0, "max_step_embeddings": 1}},
  "optim": {"lr": 0.003, "weight_decay": 0.0, "batch_size": 8, "max_epochs": 50, "patience": 1000},
  "data": {"name": "separable", "source": {"type": "synthetic_tabular", "generator": {"family": "gaussian_clusters", "separation": 12.0, "n_context": 16, "n_query": 8, "n_features": 4, "n_classes": 2}, "train_tasks": 64, "val_tasks": 8, "test_tasks": 8}},
  "seeds": [0]}"#;

/// 32 windows of a constant level plus a period-16 sinusoid; the level
/// spans [-1, 1] and the phase shifts with the window index.
fn sinusoid_windows() -> Vec<Window> {
    (0..32)
        .map(|i| {
            let level = -1.0 + 2.0 * i as f64 / 31.0;
            let f = |t: usize| level + (2.0 * std::f64::consts::PI * t as f64 / 16.0 + 0.7 * i as f64).sin();
            Window { context: Tensor::from_fn(&[64, 1], f), target: Tensor::from_fn(&[16, 1], |t| f(64 + t)) }
        })
        .collect()
}

fn overfit() -> Result<String, String> {
    let cfg = config(TS_OVERFIT)?;
    let w = sinusoid_windows();
    let data = Prepared { train: Examples::Windows(w.clone()), val: Examples::Windows(w.clone()), test: Examples::Windows(w) };
    let (model, history) = train_and_evaluate::<f32>(&cfg, &cfg.model, &data, 0).map_err(|e| e.to_string())?;
    let pinball = metric(&model.metrics(&data.train, 0).map_err(|e| e.to_string())?, MetricName::Pinball);
    if !(pinball < 0.05 && history.steps <= 500) {
        return Err(format!("ts pinball {pinball:.4} after {} steps", history.steps));
    }

    let cfg = config(TAB_OVERFIT)?;
    let p = TabGenParams { family: TabFamily::GaussianClusters { separation: 12.0 }, n_context: 16, n_query: 8, n_features: 4, n_classes: 2 };
    let tasks = gen_synthetic_tabular(&p, 5, 64).map_err(|e| e.to_string())?;
    let data = Prepared { train: Examples::Tasks(tasks.clone()), val: Examples::Tasks(tasks.clone()), test: Examples::Tasks(tasks) };
    let (model, h2) = train_and_evaluate::<f32>(&cfg, &cfg.model, &data, 0).map_err(|e| e.to_string())?;
    let acc = metric(&model.metrics(&data.train, 0).map_err(|e| e.to_string())?, MetricName::Accuracy);
    if acc < 1.0 {
        return Err(format!("ts pinball {pinball:.4}; tabular train accuracy {acc:.4} after {} epochs", h2.epochs_run()));
    }
    Ok(format!("ts pinball {pinball:.4} in {} steps; tabular train accuracy {acc} in {} epochs", history.steps, h2.epochs_run()))
}

/// Two-hop lookup, two ICL layers; the compared models differ only in the
/// recurrence depth.
fn khop_config(r: usize) -> String {
    format!(
        r#"{{
  "model": {{"family": "tabular", "task": {{"kind": "classification", "n_classes": 5}}, "max_features": 8,
    "cell_block": {{"model_dim": 32, "n_heads": 4, "ffn_dim": 64, "dropout_p": 0.0}},
    "icl": {{"kind": "plain", "layers": 2, "block": {{"model_dim": 32, "n_heads": 4, "ffn_dim": 64, "dropout_p": 0.0}}}},
    "feedback_hidden": 32, "recurrence": {{"r_train": {r}, "r_eval": {r}, "max_step_embeddings": 2}}}},
  "optim": {{"lr": 0.001, "weight_decay": 0.0001, "batch_size": 8, "max_epochs": 40, "patience": 40}},
  "data": {{"name": "khop2", "seed": 1, "source": {{"type": "synthetic_tabular", "generator": {{"family": "k_hop_lookup", "k": 2, "n_context": 5, "n_query": 5, "n_features": 5, "n_classes": 5}}, "train_tasks": 512, "val_tasks": 64, "test_tasks": 128}}}},
  "seeds": [0]}}"#
    )
}

fn directional() -> Result<String, String> {
    let (base, cot) = (config(&khop_config(0))?, config(&khop_config(2))?);
    let data = prepare(&base).map_err(|e| e.to_string())?;
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..5 {
        let mut acc = [0.0; 2];
        for (k, cfg) in [&base, &cot].into_iter().enumerate() {
            let (model, _) = train_and_evaluate::<f32>(cfg, &cfg.model, &data, seed).map_err(|e| e.to_string())?;
            acc[k] = metric(&model.metrics(&data.test, cfg.model.passes().1).map_err(|e| e.to_string())?, MetricName::Accuracy);
        }
        wins += usize::from(acc[1] > acc[0]);
        rows.push(format!("seed {seed}: {:.3} vs {:.3}", acc[1], acc[0]));
    }
    let detail = format!("cot(2,2) beats baseline on {wins}/5 seeds [{}]", rows.join(", "));
    if wins >= 4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

const TINY_SWEEP: &str = r#"{
  "model": {"family": "ts", "context_len": 32, "horizon": 8, "patch_size": 8,
    "stack": {"kind": "plain", "layers": 1, "block": {"model_dim": 16, "n_heads": 2, "ffn_dim": 32, "dropout_p": 0.0}},
    "feedback_hidden": 16, "recurrence": {"r_train": 0, "r_eval": 0, "max_step_embeddings": 2}, "loss": "pinball"},
  "optim": {"lr": 0.003, "batch_size": 16, "max_epochs": 3, "patience": 3},
  "data": {"name": "tiny", "seed": 3, "split": {"stride": 4}, "source": {"type": "synthetic_ts", "generator": {"family": "sinusoid", "periods": [12.0, 30.0], "amplitudes": [1.0, 0.5], "ar_coef": 0.5, "noise_std": 0.1, "length": 400, "channels": 1}}},
  "sweep": {"r_train": [0, 2], "r_eval": [0, 1, 2, 4, 8], "looped": [[1, 2]]},
  "seeds": [0, 1]}"#;

fn sweep_and_report(cfg: &RunConfig, jobs: usize, dir: &std::path::Path) -> Result<Vec<u8>, String> {
    let results = run_sweep::<f32>(cfg, jobs).map_err(|e| e.to_string())?;
    let records: Vec<MetricRecord> = results.into_iter().flat_map(|r| r.records).collect();
    let path = dir.join("records.jsonl");
    write_records(&path, &records).map_err(|e| e.to_string())?;
    let records = read_records(&path).map_err(|e| e.to_string())?;
    let opts = AggregateOptions {
        r_train: Some(vec![2]),
        r_eval: Some(cfg.sweep.r_eval.clone()),
        looped: Some(cfg.sweep.looped.clone()),
    };
    let files = run_report(&records, &opts, dir).map_err(|e| e.to_string())?;
    std::fs::read(files.json).map_err(|e| e.to_string())
}

fn depth_extrapolation() -> Result<String, String> {
    let cfg = config(TINY_SWEEP)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    sweep_and_report(&cfg, 1, dir.path())?;
    let records = read_records(&dir.path().join("records.jsonl")).map_err(|e| e.to_string())?;
    for r_eval in [4, 8] {
        let m = MethodId::Cot { r_train: 2, r_eval };
        let found: Vec<_> = records.iter().filter(|r| r.method == m).collect();
        if found.is_empty() || found.iter().any(|r| !r.value.is_finite()) {
            return Err(format!("{m} has no finite records"));
        }
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("depth_scaling.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let points: Vec<u64> = report.as_array().into_iter().flatten().filter_map(|p| p["r_eval"].as_u64()).collect();
    if points != [0, 1, 2, 4, 8] {
        return Err(format!("depth points {points:?}"));
    }
    Ok(format!("R_train=2 finite at R_eval 4 and 8; depth points {points:?}"))
}

fn reproducibility() -> Result<String, String> {
    let cfg = config(TINY_SWEEP)?;
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let first = sweep_and_report(&cfg, 1, a.path())?;
    let second = sweep_and_report(&cfg, 2, b.path())?;
    if first != second {
        return Err("report.json differs between runs".into());
    }
    Ok(format!("report.json identical across runs ({} bytes, 1 and 2 jobs)", first.len()))
}

fn panic_text(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panicked".into())
}

fn main() -> ExitCode {
    // (name, gating, check)
    let checks: [(&str, bool, Check); 13] = [
        ("gradient suite", true, gradients),
        ("zero-pass equivalence", true, zero_passes),
        ("length law", true, length_law),
        ("mask soundness", true, mask_soundness),
        ("gate algebra", true, gate_algebra),
        ("looped-stack oracle", true, looped_stack),
        ("loss oracles", true, loss_oracles),
        ("optimizer oracle", true, optimizer),
        ("overfit", true, overfit),
        ("directional k-hop benefit", false, directional),
        ("depth extrapolation", true, depth_extrapolation),
        ("harness reproducibility", true, reproducibility),
        ("aggregation correctness", true, aggregation),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, gating, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| Err(panic_text(p)));
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                let note = if gating { "" } else { " (not gating)" };
                println!("FAIL {name}{note}: {detail} [{secs:.1}s]");
                failed += usize::from(gating);
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
