use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::ts::Window;

/// Contiguous train / validation / test ranges over time steps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemporalSplit {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Splits `len` steps in time order: train first, then the validation
/// slice, then the test slice.
pub fn temporal_split(len: usize, val_frac: f64, test_frac: f64) -> Result<TemporalSplit> {
    if !(0.0..1.0).contains(&val_frac) || !(0.0..1.0).contains(&test_frac) || val_frac + test_frac >= 1.0 {
        return Err(Error::config("data.split", "fractions must be in [0, 1) and sum below 1"));
    }
    let n_test = (len as f64 * test_frac).round() as usize;
    let n_val = (len as f64 * val_frac).round() as usize;
    let train_end = len - n_test - n_val;
    Ok(TemporalSplit { train: 0..train_end, val: train_end..train_end + n_val, test: train_end + n_val..len })
}

/// Windows whose forecast targets lie inside `region`. Contexts are the
/// `context_len` steps right before each target and may precede `region`.
pub fn windows_in(series: &Tensor<f64>, region: Range<usize>, context_len: usize, horizon: usize, stride: usize) -> Vec<Window> {
    let c = series.shape()[1];
    let first = region.start.max(context_len);
    let mut out = Vec::new();
    let mut start = first;
    while start + horizon <= region.end {
        let slice = |from: usize, len: usize| Tensor::from_fn(&[len, c], |i| series.at(&[from + i / c, i % c]));
        out.push(Window { context: slice(start - context_len, context_len), target: slice(start, horizon) });
        start += stride.max(1);
    }
    out
}

fn by_class(labels: &[usize], rng: &mut ChaCha8Rng) -> BTreeMap<usize, Vec<usize>> {
    let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        classes.entry(y).or_default().push(i);
    }
    for idx in classes.values_mut() {
        idx.shuffle(rng);
    }
    classes
}

/// Holds out `frac` of every class. Returns sorted `(kept, held_out)`.
pub fn stratified_split(labels: &[usize], frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut keep, mut held) = (Vec::new(), Vec::new());
    for idx in by_class(labels, &mut rng).into_values() {
        let n_held = (idx.len() as f64 * frac).round() as usize;
        held.extend_from_slice(&idx[..n_held]);
        keep.extend_from_slice(&idx[n_held..]);
    }
    keep.sort_unstable();
    held.sort_unstable();
    (keep, held)
}

/// `k` disjoint, exhaustive folds; per-fold class counts are within one of
/// proportional.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > labels.len() {
        return Err(Error::config("data.folds", format!("need 2 <= k <= {}", labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let dealt = by_class(labels, &mut rng).into_values().flatten();
    for (i, idx) in dealt.enumerate() {
        folds[i % k].push(idx);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}
