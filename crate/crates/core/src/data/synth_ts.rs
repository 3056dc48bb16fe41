use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TsFamily {
    /// Sum of sinusoids with random phases plus AR(1) noise.
    Sinusoid { periods: Vec<f64>, amplitudes: Vec<f64>, ar_coef: f64, noise_std: f64 },
    /// Continuous piecewise-linear trend with a new slope every segment.
    PiecewiseTrend { segment_len: usize, slope_std: f64, noise_std: f64 },
    /// Markov-switching level, amplitude and period.
    RegimeSwitching { n_regimes: usize, switch_prob: f64, period: f64, noise_std: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsGenParams {
    #[serde(flatten)]
    pub family: TsFamily,
    pub length: usize,
    pub channels: usize,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// A reproducible `[length, channels]` series.
pub fn gen_synthetic_ts(params: &TsGenParams, seed: u64) -> Result<Tensor<f64>> {
    if params.length == 0 || params.channels == 0 {
        return Err(Error::config("data.generator", "length and channels must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t_len, c) = (params.length, params.channels);
    let mut out = vec![0.0; t_len * c];
    for ch in 0..c {
        let series = match &params.family {
            TsFamily::Sinusoid { periods, amplitudes, ar_coef, noise_std } => {
                if periods.len() != amplitudes.len() || periods.iter().any(|&p| p <= 0.0) {
                    return Err(Error::config("data.generator.periods", "need one positive period per amplitude"));
                }
                if ar_coef.abs() >= 1.0 {
                    return Err(Error::config("data.generator.ar_coef", "must satisfy |phi| < 1"));
                }
                let phases: Vec<f64> = periods.iter().map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
                let mut e = 0.0;
                (0..t_len)
                    .map(|t| {
                        let mut x = 0.0;
                        for ((p, a), ph) in periods.iter().zip(amplitudes).zip(&phases) {
                            x += a * (std::f64::consts::TAU * ((t as f64) % p) / p + ph).sin();
                        }
                        if *noise_std > 0.0 {
                            e = ar_coef * e + noise_std * normal(&mut rng);
                        }
                        x + e
                    })
                    .collect::<Vec<_>>()
            }
            TsFamily::PiecewiseTrend { segment_len, slope_std, noise_std } => {
                if *segment_len == 0 {
                    return Err(Error::config("data.generator.segment_len", "must be positive"));
                }
                let mut level = normal(&mut rng);
                let mut slope = 0.0;
                (0..t_len)
                    .map(|t| {
                        if t % segment_len == 0 {
                            slope = slope_std * normal(&mut rng);
                        }
                        level += slope;
                        level + noise_std * normal(&mut rng)
                    })
                    .collect()
            }
            TsFamily::RegimeSwitching { n_regimes, switch_prob, period, noise_std } => {
                if *n_regimes == 0 || !(0.0..=1.0).contains(switch_prob) || *period <= 0.0 {
                    return Err(Error::config("data.generator", "invalid regime parameters"));
                }
                let regimes: Vec<(f64, f64, f64)> = (0..*n_regimes)
                    .map(|r| (2.0 * r as f64 - (*n_regimes as f64 - 1.0), rng.random_range(0.5..1.5), period * (1.0 + r as f64 * 0.5)))
                    .collect();
                let mut state = rng.random_range(0..*n_regimes);
                (0..t_len)
                    .map(|t| {
                        if rng.random::<f64>() < *switch_prob {
                            state = rng.random_range(0..*n_regimes);
                        }
                        let (mu, amp, p) = regimes[state];
                        mu + amp * (std::f64::consts::TAU * t as f64 / p).sin() + noise_std * normal(&mut rng)
                    })
                    .collect()
            }
        };
        for (t, v) in series.into_iter().enumerate() {
            out[t * c + ch] = v;
        }
    }
    Tensor::new(vec![t_len, c], out)
}
