use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use super::config::{ModelSection, RunConfig};
use super::models::{method_model, AnyModel, ExampleRef, Examples, Fitting};
use super::prepare::{prepare, Prepared};
use super::weights::save_weights;
use crate::data::{aggregate, AggregateOptions, MethodId, MetricRecord, Report};
use crate::error::{Error, Result};
use crate::nn::StackKind;
use crate::scalar::Scalar;
use crate::train::{fit, History};

/// One trained model of a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub method: MethodId,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: Cell,
    pub records: Vec<MetricRecord>,
    pub history: History,
}

/// Trains `model_cfg` with the run's optimizer settings and early stopping
/// at the training depth.
pub fn train_and_evaluate<T: Scalar>(cfg: &RunConfig, model_cfg: &ModelSection, data: &Prepared, seed: u64) -> Result<(AnyModel<T>, History)> {
    let mut model = AnyModel::<T>::new(model_cfg, seed)?;
    let (r_train, _) = model_cfg.passes();
    let train = ExampleRef::all(&data.train);
    let val = ExampleRef::all(&data.val);
    let mut optim = cfg.optim.clone();
    if optim.clip_norm.is_none() && matches!(model_cfg, ModelSection::Pfn(_)) {
        optim.clip_norm = Some(1.0);
    }
    let history = {
        let mut fitting = Fitting { model: &mut model, examples: std::marker::PhantomData, r_train, r_eval: r_train };
        fit(&mut fitting, &train, &val, &optim, seed)?
    };
    Ok((model, history))
}

fn records_for<T: Scalar>(
    model: &AnyModel<T>,
    data: &Prepared,
    evals: &[(MethodId, usize)],
    dataset: &str,
    seed: u64,
    hash: &str,
) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for &(method, passes) in evals {
        for (split, examples) in [("val", &data.val), ("test", &data.test)] {
            for (metric, value) in model.metrics(examples, passes)? {
                if !value.is_finite() {
                    return Err(Error::NonFinitePass { pass: passes });
                }
                out.push(MetricRecord {
                    dataset: dataset.to_string(),
                    method,
                    seed,
                    split: split.into(),
                    metric: metric.to_string(),
                    value,
                    config_hash: hash.to_string(),
                });
            }
        }
    }
    Ok(out)
}

/// Every (trained method, seed) pair of a sweep, seeds outermost.
pub fn sweep_cells(cfg: &RunConfig) -> Vec<Cell> {
    cfg.seeds
        .iter()
        .flat_map(|&seed| cfg.sweep.trained_methods().into_iter().map(move |method| Cell { method, seed }))
        .collect()
}

fn evaluations(cfg: &RunConfig, trained: MethodId) -> Vec<(MethodId, usize)> {
    let grid = &cfg.sweep;
    match trained {
        MethodId::Baseline => {
            let mut v = vec![(MethodId::Baseline, 0)];
            // A model trained without recurrence is exactly the baseline.
            if grid.r_train.contains(&0) {
                v.extend(grid.r_eval.iter().map(|&r_eval| (MethodId::Cot { r_train: 0, r_eval }, r_eval)));
            }
            v
        }
        MethodId::Cot { r_train, .. } => {
            grid.r_eval.iter().map(|&r_eval| (MethodId::Cot { r_train, r_eval }, r_eval)).collect()
        }
        other => vec![(other, 0)],
    }
}

fn run_cell<T: Scalar>(cfg: &RunConfig, data: &Prepared, cell: Cell, hash: &str) -> Result<CellResult> {
    let model_cfg = method_model(&cfg.model, cell.method)?;
    let (model, history) = train_and_evaluate::<T>(cfg, &model_cfg, data, cell.seed)?;
    let records = records_for(&model, data, &evaluations(cfg, cell.method), &cfg.data.name, cell.seed, hash)?;
    Ok(CellResult { cell, records, history })
}

/// Runs all sweep cells on up to `jobs` threads. Results come back in cell
/// order regardless of scheduling.
pub fn run_sweep<T: Scalar>(cfg: &RunConfig, jobs: usize) -> Result<Vec<CellResult>> {
    cfg.validate()?;
    let data = prepare(cfg)?;
    let hash = cfg.config_hash();
    let cells = sweep_cells(cfg);
    let slots: Vec<Mutex<Option<Result<CellResult>>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, cells.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let r = run_cell::<T>(cfg, &data, cells[i], &hash);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().unwrap().expect("every cell ran")).collect()
}

/// Method id a single-run configuration corresponds to.
pub fn method_of(model: &ModelSection) -> MethodId {
    let kind = match model {
        ModelSection::Ts(c) => c.stack.kind,
        ModelSection::Tabular(c) => c.icl.kind,
        ModelSection::Pfn(c) => c.stack,
    };
    let (r_train, r_eval) = model.passes();
    match kind {
        StackKind::Deeper { .. } => MethodId::Deeper,
        StackKind::Looped { blocks, loops } => MethodId::Looped { blocks, loops },
        StackKind::Plain { .. } if r_train == 0 && r_eval == 0 => MethodId::Baseline,
        StackKind::Plain { .. } => MethodId::Cot { r_train, r_eval },
    }
}

#[derive(Clone, Debug)]
pub struct TrainArtifacts {
    pub weights: PathBuf,
    pub history: PathBuf,
    pub records: PathBuf,
    pub best_val: f64,
    pub records_written: Vec<MetricRecord>,
}

/// Trains the configuration as written and writes weights, history,
/// metrics and the resolved config into `out`.
pub fn run_train<T: Scalar>(cfg: &RunConfig, out: &Path, seed: u64) -> Result<TrainArtifacts> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let data = prepare(cfg)?;
    let hash = cfg.config_hash();
    let (model, history) = train_and_evaluate::<T>(cfg, &cfg.model, &data, seed)?;
    let (_, r_eval) = cfg.model.passes();
    let records = records_for(&model, &data, &[(method_of(&cfg.model), r_eval)], &cfg.data.name, seed, &hash)?;
    let weights = out.join("weights.bin");
    save_weights(&weights, model.params())?;
    let history_path = out.join("history.jsonl");
    history.write_jsonl(&history_path)?;
    let records_path = out.join("records.jsonl");
    crate::data::write_records(&records_path, &records)?;
    let mut resolved = serde_json::to_value(cfg)?;
    resolved["config_hash"] = serde_json::Value::String(hash);
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&resolved)? + "\n")?;
    Ok(TrainArtifacts {
        weights,
        history: history_path,
        records: records_path,
        best_val: history.best.map(|s| s.value).unwrap_or(f64::NAN),
        records_written: records,
    })
}

#[derive(Clone, Debug)]
pub struct ReportFiles {
    pub report: Report,
    pub json: PathBuf,
    pub table: PathBuf,
    pub depth_scaling: PathBuf,
}

/// Aggregates records and writes `report.json`, `report.txt` and
/// `depth_scaling.json` into `out`.
pub fn run_report(records: &[MetricRecord], opts: &AggregateOptions, out: &Path) -> Result<ReportFiles> {
    let mut report = aggregate(records, opts)?;
    let mut sorted: Vec<String> = records.iter().map(|r| serde_json::to_string(r).expect("records serialize")).collect();
    sorted.sort();
    let digest: String = Sha256::digest(sorted.join("\n").as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
    report.metadata.insert("records".into(), records.len().to_string());
    report.metadata.insert("records_sha256".into(), digest);
    report.metadata.insert("generator".into(), format!("latentloop {}", env!("CARGO_PKG_VERSION")));
    std::fs::create_dir_all(out)?;
    let json = out.join("report.json");
    std::fs::write(&json, serde_json::to_string_pretty(&report)? + "\n")?;
    let table = out.join("report.txt");
    std::fs::write(&table, report.to_table())?;
    let depth_scaling = out.join("depth_scaling.json");
    std::fs::write(&depth_scaling, serde_json::to_string_pretty(&report.depth_scaling)? + "\n")?;
    Ok(ReportFiles { report, json, table, depth_scaling })
}

impl Examples {
    /// Number of examples per split, for logging.
    pub fn describe(&self) -> String {
        match self {
            Examples::Windows(w) => format!("{} windows", w.len()),
            Examples::Tasks(t) => format!("{} tasks", t.len()),
        }
    }
}
