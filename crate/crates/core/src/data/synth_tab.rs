use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::tabular::{TabularTask, TaskKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TabFamily {
    /// `y = argmax(W x)` with Gaussian `W` and `x`.
    LinearLogit,
    /// Isotropic unit-variance clusters around random means.
    GaussianClusters { separation: f64 },
    /// Context rows map a one-hot key `s` to label `f(s)` for a random
    /// permutation `f`; a query with key `s` is labeled `f^k(s)`.
    KHopLookup { k: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabGenParams {
    #[serde(flatten)]
    pub family: TabFamily,
    pub n_context: usize,
    pub n_query: usize,
    pub n_features: usize,
    pub n_classes: usize,
}

impl TabGenParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_context == 0 || self.n_query == 0 || self.n_features == 0 {
            return Err(Error::config("data.generator", "row and feature counts must be positive"));
        }
        if self.n_classes < 2 {
            return Err(Error::config("data.generator.n_classes", "need at least two classes"));
        }
        if let TabFamily::KHopLookup { k } = self.family {
            if k == 0 {
                return Err(Error::config("data.generator.k", "must be positive"));
            }
            if self.n_features != self.n_classes {
                return Err(Error::config("data.generator.n_features", "k-hop lookup needs one feature per symbol"));
            }
            if self.n_context < self.n_classes {
                return Err(Error::config("data.generator.n_context", "every symbol needs a context row"));
            }
        }
        Ok(())
    }
}

/// Normal CDF via `erf`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Class-conditional densities of one gaussian-clusters task.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianClusters {
    pub means: Vec<Vec<f64>>,
}

impl GaussianClusters {
    /// Means spread by `separation`; for two classes they are exactly
    /// `separation` apart.
    pub fn sample<R: Rng>(rng: &mut R, n_classes: usize, d: usize, separation: f64) -> Self {
        let unit = |rng: &mut R| {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let means = if n_classes == 2 {
            let u = unit(rng);
            vec![u.iter().map(|x| -0.5 * separation * x).collect(), u.iter().map(|x| 0.5 * separation * x).collect()]
        } else {
            (0..n_classes).map(|_| unit(rng).into_iter().map(|x| x * separation).collect()).collect()
        };
        GaussianClusters { means }
    }

    /// Log density up to the shared normalizer.
    pub fn log_density(&self, x: &[f64], class: usize) -> f64 {
        -0.5 * self.means[class].iter().zip(x).map(|(m, v)| (v - m).powi(2)).sum::<f64>()
    }

    /// Maximum-density class under equal priors.
    pub fn bayes_predict(&self, x: &[f64]) -> usize {
        (0..self.means.len())
            .max_by(|&a, &b| self.log_density(x, a).total_cmp(&self.log_density(x, b)).then(b.cmp(&a)))
            .unwrap()
    }

    /// Exact Bayes accuracy for two classes: `Phi(delta / 2)`.
    pub fn bayes_accuracy(&self) -> Option<f64> {
        if self.means.len() != 2 {
            return None;
        }
        let delta = self.means[0].iter().zip(&self.means[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        Some(normal_cdf(delta / 2.0))
    }

    pub fn draw<R: Rng>(&self, rng: &mut R, class: usize) -> Vec<f64> {
        self.means[class]
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + z
            })
            .collect()
    }
}

fn task_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0xA076_1D64_78BD_642F) ^ (index as u64 + 1).wrapping_mul(0xE703_7ED1_A0B4_28DB)
}

fn one_task(p: &TabGenParams, rng: &mut ChaCha8Rng) -> TabularTask {
    let (nc, nq, d, c) = (p.n_context, p.n_query, p.n_features, p.n_classes);
    let n = nc + nq;
    let mut x = vec![0.0; n * d];
    let mut y = vec![0.0; n];
    match &p.family {
        TabFamily::LinearLogit => {
            let w: Vec<f64> = (0..c * d).map(|_| StandardNormal.sample(rng)).collect();
            for r in 0..n {
                let row: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                let logit = |k: usize| (0..d).map(|j| w[k * d + j] * row[j]).sum::<f64>();
                y[r] = (0..c).max_by(|&a, &b| logit(a).total_cmp(&logit(b))).unwrap() as f64;
                x[r * d..(r + 1) * d].copy_from_slice(&row);
            }
        }
        TabFamily::GaussianClusters { separation } => {
            let g = GaussianClusters::sample(rng, c, d, *separation);
            for r in 0..n {
                let class = rng.random_range(0..c);
                y[r] = class as f64;
                x[r * d..(r + 1) * d].copy_from_slice(&g.draw(rng, class));
            }
        }
        TabFamily::KHopLookup { k } => {
            let mut f: Vec<usize> = (0..c).collect();
            f.shuffle(rng);
            let mut keys: Vec<usize> = (0..nc).map(|i| i % c).collect();
            keys.shuffle(rng);
            keys.extend((0..nq).map(|_| rng.random_range(0..c)));
            for (r, &s) in keys.iter().enumerate() {
                x[r * d + s] = 1.0;
                let hops = if r < nc { 1 } else { *k };
                y[r] = (0..hops).fold(s, |acc, _| f[acc]) as f64;
            }
        }
    }
    TabularTask {
        x_context: Tensor::from_parts(vec![nc, d], x[..nc * d].to_vec()),
        y_context: y[..nc].to_vec(),
        x_query: Tensor::from_parts(vec![nq, d], x[nc * d..].to_vec()),
        y_query: y[nc..].to_vec(),
        kind: TaskKind::Classification { n_classes: c },
    }
}

/// `count` tasks; task `i` depends only on `(seed, i)`.
pub fn gen_synthetic_tabular(params: &TabGenParams, seed: u64, count: usize) -> Result<Vec<TabularTask>> {
    params.validate()?;
    Ok((0..count)
        .map(|i| one_task(params, &mut ChaCha8Rng::seed_from_u64(task_seed(seed, i))))
        .collect())
}
