use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    MseMedian,
    Pinball,
    Accuracy,
    Auc,
    NegRmse,
    /// Mean validation loss, used for model selection only.
    Loss,
}

impl MetricName {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetricName::MseMedian => "mse_median",
            MetricName::Pinball => "pinball",
            MetricName::Accuracy => "accuracy",
            MetricName::Auc => "auc",
            MetricName::NegRmse => "neg_rmse",
            MetricName::Loss => "loss",
        }
    }

    pub fn higher_is_better(&self) -> bool {
        matches!(self, MetricName::Accuracy | MetricName::Auc | MetricName::NegRmse)
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mse_median" => MetricName::MseMedian,
            "pinball" => MetricName::Pinball,
            "accuracy" => MetricName::Accuracy,
            "auc" => MetricName::Auc,
            "neg_rmse" => MetricName::NegRmse,
            "loss" => MetricName::Loss,
            other => return Err(Error::Schema(format!("unknown metric {other}"))),
        })
    }
}

/// Direction of a metric given by name; `None` for unknown names.
pub fn metric_direction(name: &str) -> Option<bool> {
    name.parse::<MetricName>().ok().map(|m| m.higher_is_better())
}

/// ROC-AUC through the Mann-Whitney statistic, ties counted as one half.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Input("scores and labels differ in length".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Input("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average ranks over tied runs (1-based).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += order[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * avg;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Probability of class 1 from `[n, 2]` probabilities.
pub fn binary_scores(probs: &Tensor<f64>) -> Result<Vec<f64>> {
    if probs.rank() != 2 || probs.shape()[1] != 2 {
        return Err(Error::shape("binary_scores", format!("{:?}", probs.shape())));
    }
    Ok((0..probs.shape()[0]).map(|i| probs.at(&[i, 1])).collect())
}

/// Argmax accuracy for `[n, C]` scores; ties go to the lowest class.
pub fn accuracy(scores: &Tensor<f64>, targets: &[f64]) -> Result<f64> {
    if scores.rank() != 2 || scores.shape()[0] != targets.len() || targets.is_empty() {
        return Err(Error::shape("accuracy", format!("{:?} for {} targets", scores.shape(), targets.len())));
    }
    let c = scores.shape()[1];
    let hits = targets
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = &scores.data()[i * c..(i + 1) * c];
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best as f64 == y
        })
        .count();
    Ok(hits as f64 / targets.len() as f64)
}

pub fn neg_rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Input("prediction and target lengths differ".into()));
    }
    let mse = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64;
    Ok(-mse.sqrt())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn brute_auc(s: &[f64], y: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] && !y[j] {
                    den += 1.0;
                    if s[i] > s[j] {
                        num += 1.0;
                    } else if s[i] == s[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn separated_scores() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]).unwrap(), 0.0);
    }

    #[test]
    fn six_points_one_tie() {
        let s = [0.3, 0.5, 0.5, 0.1, 0.9, 0.7];
        let y = [false, true, false, false, true, true];
        assert_eq!(auc(&s, &y).unwrap(), brute_auc(&s, &y));
        assert_eq!(auc(&s, &y).unwrap(), 8.5 / 9.0);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn random_scores_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s: Vec<f64> = (0..1000).map(|_| rng.random()).collect();
        let y: Vec<bool> = (0..1000).map(|_| rng.random()).collect();
        assert!((auc(&s, &y).unwrap() - 0.5).abs() < 0.05);
    }

    #[test]
    fn accuracy_and_rmse() {
        let p = Tensor::new(vec![3, 2], vec![0.9, 0.1, 0.2, 0.8, 0.6, 0.4]).unwrap();
        assert_eq!(accuracy(&p, &[0.0, 1.0, 1.0]).unwrap(), 2.0 / 3.0);
        assert_eq!(neg_rmse(&[1.0, 3.0], &[1.0, 1.0]).unwrap(), -(2.0f64).sqrt());
    }
}
