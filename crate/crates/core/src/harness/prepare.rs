use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{DataSource, ModelSection, RunConfig};
use super::models::Examples;
use crate::autodiff::Tensor;
use crate::data::{gen_synthetic_tabular, gen_synthetic_ts, load_csv, stratified_split, temporal_split, windows_in, EncodedTable};
use crate::error::{Error, Result};
use crate::tabular::{TabularTask, TaskKind};

/// Train / validation / test examples of one dataset.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Examples,
    pub val: Examples,
    pub test: Examples,
}

fn task_kind(model: &ModelSection) -> Option<TaskKind> {
    match model {
        ModelSection::Ts(_) => None,
        ModelSection::Tabular(c) => Some(c.task),
        ModelSection::Pfn(c) => Some(TaskKind::Classification { n_classes: c.n_classes }),
    }
}

fn prepare_series(cfg: &RunConfig, series: &Tensor<f64>) -> Result<Prepared> {
    let ModelSection::Ts(m) = &cfg.model else { unreachable!("checked by caller") };
    let split = &cfg.data.split;
    let s = temporal_split(series.shape()[0], split.val_frac.unwrap_or(0.1), split.test_frac.unwrap_or(0.2))?;
    let stride = split.stride.unwrap_or(1);
    let train = windows_in(series, s.train.clone(), m.context_len, m.horizon, stride);
    let val = windows_in(series, s.val.clone(), m.context_len, m.horizon, m.horizon);
    let test = windows_in(series, s.test.clone(), m.context_len, m.horizon, m.horizon);
    for (name, w) in [("train", &train), ("val", &val), ("test", &test)] {
        if w.is_empty() {
            return Err(Error::config("data.split", format!("{name} split yields no windows")));
        }
    }
    Ok(Prepared { train: Examples::Windows(train), val: Examples::Windows(val), test: Examples::Windows(test) })
}

fn rows_task(table: &EncodedTable, context: &[usize], query: &[usize], kind: TaskKind) -> Result<TabularTask> {
    let (x_context, y_context) = table.select(context)?;
    let (x_query, y_query) = table.select(query)?;
    let task = TabularTask { x_context, y_context, x_query, y_query, kind };
    task.validate()?;
    Ok(task)
}

fn prepare_table(cfg: &RunConfig, path: &Path, schema: &crate::data::CsvSchema, kind: TaskKind) -> Result<Prepared> {
    let raw = load_csv(path, schema)?;
    let split = &cfg.data.split;
    let seed = cfg.data.seed;
    let labels = raw.labels().unwrap_or_else(|| vec![0; raw.rows()]);
    let (rest, test) = stratified_split(&labels, split.test_frac.unwrap_or(0.2), seed);
    let rest_labels: Vec<usize> = rest.iter().map(|&i| labels[i]).collect();
    let (train_pos, val_pos) = stratified_split(&rest_labels, split.val_frac.unwrap_or(0.15), seed.wrapping_add(1));
    let train: Vec<usize> = train_pos.iter().map(|&i| rest[i]).collect();
    let val: Vec<usize> = val_pos.iter().map(|&i| rest[i]).collect();
    if train.len() < 2 || val.is_empty() || test.is_empty() {
        return Err(Error::config("data.split", "too few rows for train/validation/test"));
    }
    let table = raw.encode(&train)?;
    if let (TaskKind::Classification { n_classes }, Some(found)) = (kind, table.n_classes()) {
        if found > n_classes {
            return Err(Error::config("model.task.n_classes", format!("data has {found} classes")));
        }
    }
    let n_query = split.query_rows.unwrap_or(16).max(1);
    let n_context = split.context_rows.unwrap_or(64).min(train.len() - 1).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));

    let mut pool = train.clone();
    let mut train_tasks = Vec::new();
    for _ in 0..split.train_tasks.unwrap_or(256) {
        pool.shuffle(&mut rng);
        let q = n_query.min(pool.len() - 1);
        let c = n_context.min(pool.len() - q);
        train_tasks.push(rows_task(&table, &pool[q..q + c], &pool[..q], kind)?);
    }
    pool.shuffle(&mut rng);
    let context = &pool[..n_context];
    let eval_tasks = |rows: &[usize]| rows.chunks(n_query).map(|q| rows_task(&table, context, q, kind)).collect::<Result<Vec<_>>>();
    Ok(Prepared {
        train: Examples::Tasks(train_tasks),
        val: Examples::Tasks(eval_tasks(&val)?),
        test: Examples::Tasks(eval_tasks(&test)?),
    })
}

/// Loads or generates the configured dataset and splits it.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let data = &cfg.data;
    match (&data.source, task_kind(&cfg.model)) {
        (DataSource::SyntheticTs { generator }, None) => prepare_series(cfg, &gen_synthetic_ts(generator, data.seed)?),
        (DataSource::Csv { path, schema }, None) => {
            let raw = load_csv(Path::new(path), schema)?;
            let split = temporal_split(raw.rows(), data.split.val_frac.unwrap_or(0.1), data.split.test_frac.unwrap_or(0.2))?;
            let table = raw.encode(&split.train.collect::<Vec<_>>())?;
            let (n, d) = (table.x.shape()[0], table.x.shape()[1]);
            let series = Tensor::from_fn(&[n, d + 1], |i| {
                let (r, c) = (i / (d + 1), i % (d + 1));
                if c < d { table.x.at(&[r, c]) } else { table.y[r] }
            });
            prepare_series(cfg, &series)
        }
        (DataSource::SyntheticTabular { generator, train_tasks, val_tasks, test_tasks }, Some(kind)) => {
            if kind != (TaskKind::Classification { n_classes: generator.n_classes }) {
                return Err(Error::config("model.task", "must be classification with the generator's class count"));
            }
            let s = data.seed;
            Ok(Prepared {
                train: Examples::Tasks(gen_synthetic_tabular(generator, s, *train_tasks)?),
                val: Examples::Tasks(gen_synthetic_tabular(generator, s ^ 0x5eed_0001, *val_tasks)?),
                test: Examples::Tasks(gen_synthetic_tabular(generator, s ^ 0x5eed_0002, *test_tasks)?),
            })
        }
        (DataSource::Csv { path, schema }, Some(kind)) => prepare_table(cfg, Path::new(path), schema, kind),
        _ => Err(Error::config("data.source", "source does not match the model family")),
    }
}
