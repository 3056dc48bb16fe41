//! Validation-based depth selection and cross-method aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::MetricName;
use super::records::{check_unique, MethodId, MetricRecord};
use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Metrics in order of preference for a dataset's headline number.
const PRIMARY_ORDER: [MetricName; 5] =
    [MetricName::MseMedian, MetricName::Auc, MetricName::Accuracy, MetricName::NegRmse, MetricName::Pinball];

/// Candidate grids. `None` takes every value present in the records.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateOptions {
    pub r_train: Option<Vec<usize>>,
    pub r_eval: Option<Vec<usize>>,
    pub looped: Option<Vec<(usize, usize)>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedCot {
    pub r_train: usize,
    pub r_eval: usize,
    pub val_mean: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedLooped {
    pub blocks: usize,
    pub loops: usize,
    pub val_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub family: String,
    pub method: String,
    pub test_mean: f64,
    pub per_seed: Vec<f64>,
    pub gain_per_seed: Vec<f64>,
    pub gain: f64,
    /// Over seeds.
    pub gain_stderr: f64,
    pub rank: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub dataset: String,
    pub domain: String,
    pub metric: String,
    pub higher_is_better: bool,
    pub seeds: Vec<u64>,
    pub selected_cot: SelectedCot,
    pub selected_looped: SelectedLooped,
    pub methods: Vec<MethodSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub domain: String,
    pub family: String,
    pub avg_rank: f64,
    pub wins: usize,
    pub n_datasets: usize,
    pub gain_mean: f64,
    /// Over datasets.
    pub gain_stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthPoint {
    pub domain: String,
    pub r_eval: usize,
    pub gain_mean: f64,
    pub gain_stderr: f64,
    pub n_datasets: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    /// Free-form provenance; the only place a timestamp may appear.
    pub metadata: BTreeMap<String, String>,
    pub datasets: Vec<DatasetSummary>,
    pub methods: Vec<MethodAggregate>,
    pub depth_scaling: Vec<DepthPoint>,
}

const FAMILIES: [&str; 4] = ["baseline", "deeper", "looped", "cot"];

fn domain_of(metric: MetricName) -> &'static str {
    match metric {
        MetricName::MseMedian | MetricName::Pinball => "timeseries",
        _ => "tabular",
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Standard error of the mean with the `n - 1` variance; zero for one value.
fn stderr(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (var / v.len() as f64).sqrt()
}

/// Relative improvement over the baseline (positive is better).
fn gain(baseline: f64, method: f64, higher_is_better: bool) -> Result<f64> {
    if baseline == 0.0 {
        return Err(Error::UndefinedMetric("gain relative to a zero baseline".into()));
    }
    let diff = if higher_is_better { method - baseline } else { baseline - method };
    Ok(diff / baseline.abs())
}

/// 1-based ranks, best first, ties sharing the average rank.
pub fn average_ranks(values: &[f64], higher_is_better: bool) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let c = values[a].total_cmp(&values[b]);
        if higher_is_better { c.reverse() } else { c }
    });
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Records of one dataset, indexed by (method, split, metric) then seed.
struct DatasetView<'a> {
    name: &'a str,
    cells: BTreeMap<(MethodId, &'a str, &'a str), BTreeMap<u64, f64>>,
}

impl<'a> DatasetView<'a> {
    fn values(&self, method: MethodId, split: &'static str, metric: MetricName) -> Option<&BTreeMap<u64, f64>> {
        self.cells.get(&(method, split, metric.as_str()))
    }

    fn primary_metric(&self) -> Result<MetricName> {
        PRIMARY_ORDER
            .into_iter()
            .find(|m| self.values(MethodId::Baseline, "test", *m).is_some())
            .ok_or_else(|| Error::IncompleteSweep(vec![format!("{}/baseline/test", self.name)]))
    }

    fn missing(&self, method: MethodId, split: &'static str, metric: MetricName, seeds: &BTreeSet<u64>, out: &mut Vec<String>) {
        let have = self.values(method, split, metric);
        for s in seeds {
            if have.is_none_or(|v| !v.contains_key(s)) {
                out.push(format!("{}/{}/seed {}/{}/{}", self.name, method, s, split, metric));
            }
        }
    }

    fn val_mean(&self, method: MethodId, metric: MetricName) -> f64 {
        let v = self.values(method, "val", metric).expect("completeness checked");
        mean(&v.values().copied().collect::<Vec<_>>())
    }
}

fn group<'a>(records: &'a [MetricRecord]) -> BTreeMap<&'a str, DatasetView<'a>> {
    let mut out: BTreeMap<&str, DatasetView> = BTreeMap::new();
    for r in records {
        out.entry(&r.dataset)
            .or_insert_with(|| DatasetView { name: &r.dataset, cells: BTreeMap::new() })
            .cells
            .entry((r.method, &r.split, &r.metric))
            .or_default()
            .insert(r.seed, r.value);
    }
    out
}

struct Grid {
    r_train: Vec<usize>,
    r_eval: Vec<usize>,
    looped: Vec<(usize, usize)>,
}

fn grid(records: &[MetricRecord], opts: &AggregateOptions) -> Grid {
    let mut rt = BTreeSet::new();
    let mut re = BTreeSet::new();
    let mut lp = BTreeSet::new();
    for r in records {
        match r.method {
            MethodId::Cot { r_train, r_eval } => {
                if r_train >= 1 {
                    rt.insert(r_train);
                }
                re.insert(r_eval);
            }
            MethodId::Looped { blocks, loops } => {
                lp.insert((blocks, loops));
            }
            _ => {}
        }
    }
    Grid {
        r_train: opts.r_train.clone().unwrap_or_else(|| rt.into_iter().collect()),
        r_eval: opts.r_eval.clone().unwrap_or_else(|| re.into_iter().collect()),
        looped: opts.looped.clone().unwrap_or_else(|| lp.into_iter().collect()),
    }
}

fn check_complete(view: &DatasetView<'_>, metric: MetricName, g: &Grid) -> Result<BTreeSet<u64>> {
    let seeds: BTreeSet<u64> =
        view.values(MethodId::Baseline, "test", metric).map(|v| v.keys().copied().collect()).unwrap_or_default();
    let mut missing = Vec::new();
    if g.r_train.is_empty() || g.r_eval.is_empty() {
        missing.push(format!("{}/cot", view.name));
    }
    if g.looped.is_empty() {
        missing.push(format!("{}/looped", view.name));
    }
    view.missing(MethodId::Deeper, "test", metric, &seeds, &mut missing);
    for &r_train in &g.r_train {
        for &r_eval in &g.r_eval {
            for split in ["val", "test"] {
                view.missing(MethodId::Cot { r_train, r_eval }, split, metric, &seeds, &mut missing);
            }
        }
    }
    for &(blocks, loops) in &g.looped {
        for split in ["val", "test"] {
            view.missing(MethodId::Looped { blocks, loops }, split, metric, &seeds, &mut missing);
        }
    }
    if missing.is_empty() { Ok(seeds) } else { Err(Error::IncompleteSweep(missing)) }
}

fn pick<K: Copy + Ord>(candidates: impl Iterator<Item = (K, f64)>, higher_is_better: bool) -> Option<(K, f64)> {
    // Candidates arrive cheapest first; only a strict improvement replaces.
    let mut best: Option<(K, f64)> = None;
    for (k, v) in candidates {
        let better = match best {
            None => true,
            Some((_, b)) => if higher_is_better { v > b } else { v < b },
        };
        if better {
            best = Some((k, v));
        }
    }
    best
}

fn select_cot_in(view: &DatasetView<'_>, metric: MetricName, g: &Grid) -> SelectedCot {
    let mut cands: Vec<(usize, usize)> =
        g.r_train.iter().flat_map(|&rt| g.r_eval.iter().map(move |&re| (rt, re))).collect();
    cands.sort_by_key(|&(rt, re)| (rt.max(re), rt + re, rt));
    let ((r_train, r_eval), val_mean) = pick(
        cands.into_iter().map(|(r_train, r_eval)| ((r_train, r_eval), view.val_mean(MethodId::Cot { r_train, r_eval }, metric))),
        metric.higher_is_better(),
    )
    .expect("grid checked non-empty");
    SelectedCot { r_train, r_eval, val_mean }
}

fn select_looped_in(view: &DatasetView<'_>, metric: MetricName, g: &Grid) -> SelectedLooped {
    let mut cands = g.looped.clone();
    cands.sort_by_key(|&(k, m)| (k * m, k));
    let ((blocks, loops), val_mean) = pick(
        cands.into_iter().map(|(blocks, loops)| ((blocks, loops), view.val_mean(MethodId::Looped { blocks, loops }, metric))),
        metric.higher_is_better(),
    )
    .expect("grid checked non-empty");
    SelectedLooped { blocks, loops, val_mean }
}

fn dataset_view<'a>(records: &'a [MetricRecord], dataset: &str) -> Result<(DatasetView<'a>, MetricName)> {
    let view = group(records)
        .remove(dataset)
        .ok_or_else(|| Error::IncompleteSweep(vec![format!("{dataset}: no records")]))?;
    let metric = view.primary_metric()?;
    Ok((view, metric))
}

/// Per-dataset CoT depth chosen on validation records. Ties go to the
/// cheaper configuration (smaller maximum depth first).
pub fn select_best_r(records: &[MetricRecord], dataset: &str, opts: &AggregateOptions) -> Result<SelectedCot> {
    let g = grid(records, opts);
    let (view, metric) = dataset_view(records, dataset)?;
    check_complete(&view, metric, &g)?;
    Ok(select_cot_in(&view, metric, &g))
}

/// Looped configuration chosen on validation records; ties go to the
/// smaller effective depth.
pub fn select_best_looped(records: &[MetricRecord], dataset: &str, opts: &AggregateOptions) -> Result<SelectedLooped> {
    let g = grid(records, opts);
    let (view, metric) = dataset_view(records, dataset)?;
    check_complete(&view, metric, &g)?;
    Ok(select_looped_in(&view, metric, &g))
}

fn paired(view: &DatasetView<'_>, method: MethodId, metric: MetricName, seeds: &BTreeSet<u64>) -> Result<Vec<f64>> {
    let v = view.values(method, "test", metric).expect("completeness checked");
    let have: BTreeSet<u64> = v.keys().copied().collect();
    if &have != seeds {
        return Err(Error::Pairing(format!("{}: {} seeds {:?} vs baseline {:?}", view.name, method, have, seeds)));
    }
    Ok(seeds.iter().map(|s| v[s]).collect())
}

/// Builds the full comparison report from a record set.
pub fn aggregate(records: &[MetricRecord], opts: &AggregateOptions) -> Result<Report> {
    check_unique(records)?;
    let g = grid(records, opts);
    let views = group(records);
    if views.is_empty() {
        return Err(Error::IncompleteSweep(vec!["no records".into()]));
    }
    let mut missing = Vec::new();
    let mut datasets = Vec::new();
    // (domain, r_eval) -> per-dataset gains
    let mut depth: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for view in views.values() {
        let metric = view.primary_metric()?;
        let seeds = match check_complete(view, metric, &g) {
            Ok(s) => s,
            Err(Error::IncompleteSweep(m)) => {
                missing.extend(m);
                continue;
            }
            Err(e) => return Err(e),
        };
        let hib = metric.higher_is_better();
        let cot = select_cot_in(view, metric, &g);
        let looped = select_looped_in(view, metric, &g);
        let methods = [
            MethodId::Baseline,
            MethodId::Deeper,
            MethodId::Looped { blocks: looped.blocks, loops: looped.loops },
            MethodId::Cot { r_train: cot.r_train, r_eval: cot.r_eval },
        ];
        let base = paired(view, MethodId::Baseline, metric, &seeds)?;
        let mut summaries = Vec::new();
        for m in methods {
            let per_seed = paired(view, m, metric, &seeds)?;
            let gains = base.iter().zip(&per_seed).map(|(&b, &v)| gain(b, v, hib)).collect::<Result<Vec<_>>>()?;
            summaries.push(MethodSummary {
                family: m.family().into(),
                method: m.to_string(),
                test_mean: mean(&per_seed),
                gain: mean(&gains),
                gain_stderr: stderr(&gains),
                per_seed,
                gain_per_seed: gains,
                rank: 0.0,
            });
        }
        let ranks = average_ranks(&summaries.iter().map(|s| s.test_mean).collect::<Vec<_>>(), hib);
        for (s, r) in summaries.iter_mut().zip(ranks) {
            s.rank = r;
        }
        let domain = domain_of(metric).to_string();
        for &r_eval in &g.r_eval {
            let per_seed = paired(view, MethodId::Cot { r_train: cot.r_train, r_eval }, metric, &seeds)?;
            let gains = base.iter().zip(&per_seed).map(|(&b, &v)| gain(b, v, hib)).collect::<Result<Vec<_>>>()?;
            depth.entry((domain.clone(), r_eval)).or_default().push(mean(&gains));
        }
        datasets.push(DatasetSummary {
            dataset: view.name.to_string(),
            domain,
            metric: metric.to_string(),
            higher_is_better: hib,
            seeds: seeds.into_iter().collect(),
            selected_cot: cot,
            selected_looped: looped,
            methods: summaries,
        });
    }
    if !missing.is_empty() {
        return Err(Error::IncompleteSweep(missing));
    }
    let domains: BTreeSet<&str> = datasets.iter().map(|d| d.domain.as_str()).collect();
    let mut methods = Vec::new();
    for domain in &domains {
        let in_domain: Vec<&DatasetSummary> = datasets.iter().filter(|d| d.domain == *domain).collect();
        for (fi, family) in FAMILIES.iter().enumerate() {
            let rows: Vec<&MethodSummary> = in_domain.iter().map(|d| &d.methods[fi]).collect();
            debug_assert!(rows.iter().all(|r| r.family == *family));
            let gains: Vec<f64> = rows.iter().map(|r| r.gain).collect();
            methods.push(MethodAggregate {
                domain: domain.to_string(),
                family: family.to_string(),
                avg_rank: mean(&rows.iter().map(|r| r.rank).collect::<Vec<_>>()),
                wins: gains.iter().filter(|&&x| x > 0.0).count(),
                n_datasets: rows.len(),
                gain_mean: mean(&gains),
                gain_stderr: stderr(&gains),
            });
        }
    }
    let depth_scaling = depth
        .into_iter()
        .map(|((domain, r_eval), gains)| DepthPoint {
            domain,
            r_eval,
            gain_mean: mean(&gains),
            gain_stderr: stderr(&gains),
            n_datasets: gains.len(),
        })
        .collect();
    Ok(Report { schema_version: REPORT_SCHEMA_VERSION, metadata: BTreeMap::new(), datasets, methods, depth_scaling })
}

impl Report {
    /// Fixed-width summary: one row per (domain, method family).
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:<10} {:>9} {:>6} {:>22}", "domain", "method", "avg_rank", "wins", "avg_gain");
        for m in &self.methods {
            let wins = format!("{}/{}", m.wins, m.n_datasets);
            let g = format!("{:+.2}% +/- {:.2}%", 100.0 * m.gain_mean, 100.0 * m.gain_stderr);
            let _ = writeln!(out, "{:<12} {:<10} {:>9.2} {:>6} {:>22}", m.domain, m.family, m.avg_rank, wins, g);
        }
        if !self.depth_scaling.is_empty() {
            let _ = writeln!(out, "\n{:<12} {:>6} {:>22}", "domain", "R_eval", "cot_gain");
            for p in &self.depth_scaling {
                let g = format!("{:+.2}% +/- {:.2}%", 100.0 * p.gain_mean, 100.0 * p.gain_stderr);
                let _ = writeln!(out, "{:<12} {:>6} {:>22}", p.domain, p.r_eval, g);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(dataset: &str, method: MethodId, seed: u64, split: &str, metric: &str, value: f64) -> MetricRecord {
        MetricRecord {
            dataset: dataset.into(),
            method,
            seed,
            split: split.into(),
            metric: metric.into(),
            value,
            config_hash: "h".into(),
        }
    }

    /// Every method reports `value` on both splits.
    fn flat(dataset: &str, seeds: &[u64], value: f64) -> Vec<MetricRecord> {
        let mut out = Vec::new();
        let methods = [
            MethodId::Baseline,
            MethodId::Deeper,
            MethodId::Looped { blocks: 1, loops: 2 },
            MethodId::Cot { r_train: 1, r_eval: 1 },
            MethodId::Cot { r_train: 1, r_eval: 2 },
            MethodId::Cot { r_train: 2, r_eval: 1 },
            MethodId::Cot { r_train: 2, r_eval: 2 },
        ];
        for m in methods {
            for &s in seeds {
                for split in ["val", "test"] {
                    out.push(rec(dataset, m, s, split, "mse_median", value));
                }
            }
        }
        out
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[1.0, 1.0, 1.0, 1.0], true), vec![2.5; 4]);
        assert_eq!(average_ranks(&[0.3, 0.1, 0.3, 0.2], false), vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(average_ranks(&[0.3, 0.1, 0.3, 0.2], true), vec![1.5, 4.0, 1.5, 3.0]);
    }

    #[test]
    fn identical_methods_give_zero_gain() {
        let r = aggregate(&flat("a", &[0, 1], 0.5), &AggregateOptions::default()).unwrap();
        for m in &r.methods {
            assert_eq!((m.gain_mean, m.avg_rank), (0.0, 2.5));
        }
        assert_eq!(r.depth_scaling.len(), 2);
    }

    #[test]
    fn tie_goes_to_smaller_depth() {
        let s = select_best_r(&flat("a", &[0], 0.5), "a", &AggregateOptions::default()).unwrap();
        assert_eq!((s.r_train, s.r_eval), (1, 1));
    }

    #[test]
    fn selection_ignores_test_split() {
        let mut recs = flat("a", &[0], 0.5);
        for r in &mut recs {
            if r.method == (MethodId::Cot { r_train: 2, r_eval: 2 }) {
                r.value = if r.split == "val" { 0.4 } else { 0.9 };
            }
            if r.method == (MethodId::Cot { r_train: 1, r_eval: 1 }) && r.split == "test" {
                r.value = 0.1;
            }
        }
        let s = select_best_r(&recs, "a", &AggregateOptions::default()).unwrap();
        assert_eq!((s.r_train, s.r_eval), (2, 2));
    }

    #[test]
    fn per_seed_gain_average() {
        let mut recs = flat("a", &[0, 1], 1.0);
        for r in &mut recs {
            if r.method == MethodId::Deeper && r.split == "test" {
                r.value = if r.seed == 0 { 0.8 } else { 0.6 };
            }
        }
        let rep = aggregate(&recs, &AggregateOptions::default()).unwrap();
        let deeper = &rep.datasets[0].methods[1];
        assert!((deeper.gain - 0.3).abs() < 1e-15);
    }

    #[test]
    fn missing_cells_are_listed() {
        let mut recs = flat("a", &[0, 1], 1.0);
        recs.retain(|r| !(r.method == MethodId::Deeper && r.seed == 1));
        match aggregate(&recs, &AggregateOptions::default()) {
            Err(Error::IncompleteSweep(m)) => assert_eq!(m, vec!["a/deeper/seed 1/test/mse_median".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn seed_mismatch_is_pairing_error() {
        let mut recs = flat("a", &[0], 1.0);
        recs.push(rec("a", MethodId::Deeper, 7, "test", "mse_median", 1.0));
        assert!(matches!(aggregate(&recs, &AggregateOptions::default()), Err(Error::Pairing(_))));
    }
}
