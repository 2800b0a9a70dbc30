//! Feature and target preprocessing fitted on the training split only.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use crate::data::{Split, TabularDataset, TaskKind};
use crate::error::{Error, Result};
use crate::rng;

/// Default maximum number of quantile landmarks.
pub const DEFAULT_QUANTILES: usize = 1000;
/// Default std of the Gaussian noise added before fitting quantiles.
pub const DEFAULT_NOISE_STD: f64 = 1e-3;
/// Probabilities are clipped to `[BOUND, 1 - BOUND]` before the inverse
/// normal CDF so that out-of-range inputs map to finite extremes.
const BOUND: f64 = 1e-7;

/// Maps a feature to an approximately standard normal law through its
/// empirical quantiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileTransformer {
    /// Nondecreasing landmark values at evenly spaced probability levels.
    pub references: Vec<f64>,
}

/// Fit landmarks on `train_col + N(0, noise_std²)`; the noise separates
/// repeated values of low-cardinality features.
pub fn fit_quantile(train_col: &[f64], noise_std: f64, seed: u64, max_quantiles: usize) -> Result<QuantileTransformer> {
    if train_col.len() < 2 {
        return Err(Error::Data("quantile transform needs at least two training values".into()));
    }
    if train_col.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("quantile transform input contains non-finite values".into()));
    }
    let mut noised = train_col.to_vec();
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).map_err(|e| Error::Parameter(e.to_string()))?;
        let mut r = rng::stream(seed, rng::streams::QUANTILE_NOISE);
        noised.iter_mut().for_each(|v| *v += normal.sample(&mut r));
    }
    noised.sort_by(f64::total_cmp);
    let q = max_quantiles.min(train_col.len()).max(2);
    let n = noised.len();
    let references = (0..q)
        .map(|i| {
            // linear interpolation between order statistics
            let pos = i as f64 / (q - 1) as f64 * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = pos - lo as f64;
            noised[lo] + frac * (noised[hi] - noised[lo])
        })
        .collect();
    Ok(QuantileTransformer { references })
}

impl QuantileTransformer {
    fn level(&self, i: usize) -> f64 {
        i as f64 / (self.references.len() - 1) as f64
    }

    /// Probability level of `v` by piecewise-linear interpolation over the
    /// landmarks, averaging the leftmost and rightmost readings on ties.
    pub fn cdf(&self, v: f64) -> f64 {
        let r = &self.references;
        let q = r.len();
        // rightmost: r[j-1] <= v < r[j]
        let j = r.partition_point(|&x| x <= v);
        let forward = if j == 0 {
            0.0
        } else if j == q {
            1.0
        } else {
            let (a, b) = (r[j - 1], r[j]);
            self.level(j - 1) + (v - a) / (b - a) * (self.level(j) - self.level(j - 1))
        };
        // leftmost: r[j-1] < v <= r[j]
        let j = r.partition_point(|&x| x < v);
        let backward = if j == 0 {
            0.0
        } else if j == q {
            1.0
        } else {
            let (a, b) = (r[j - 1], r[j]);
            self.level(j) - (b - v) / (b - a) * (self.level(j) - self.level(j - 1))
        };
        0.5 * (forward + backward)
    }

    pub fn transform_value(&self, v: f64) -> f64 {
        let p = self.cdf(v).clamp(BOUND, 1.0 - BOUND);
        standard_normal().inverse_cdf(p)
    }

    pub fn apply(&self, col: &[f64]) -> Vec<f64> {
        col.iter().map(|&v| self.transform_value(v)).collect()
    }
}

fn standard_normal() -> StdNormal {
    StdNormal::standard()
}

/// Population (1/n) mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    pub fn fit(train_col: &[f64]) -> Result<Self> {
        if train_col.is_empty() {
            return Err(Error::Data("cannot standardize an empty column".into()));
        }
        let n = train_col.len() as f64;
        let mean = train_col.iter().sum::<f64>() / n;
        let std = (train_col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::Data("training column has zero standard deviation".into()));
        }
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, col: &[f64]) -> Vec<f64> {
        col.iter().map(|v| (v - self.mean) / self.std).collect()
    }

    pub fn invert(&self, col: &[f64]) -> Vec<f64> {
        col.iter().map(|v| v * self.std + self.mean).collect()
    }
}

/// Regression target scaler; same convention as [`Standardizer`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler(pub Standardizer);

impl TargetScaler {
    pub fn fit(y_train: &[f64]) -> Result<Self> {
        Standardizer::fit(y_train).map(TargetScaler)
    }

    pub fn scale(&self, y: &[f64]) -> Vec<f64> {
        self.0.apply(y)
    }

    pub fn unscale(&self, y: &[f64]) -> Vec<f64> {
        self.0.invert(y)
    }

    pub fn std(&self) -> f64 {
        self.0.std
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NumericPolicy {
    Quantile { noise_std: f64, max_quantiles: usize },
    Standardize,
    Identity,
}

impl Default for NumericPolicy {
    fn default() -> Self {
        NumericPolicy::Quantile {
            noise_std: DEFAULT_NOISE_STD,
            max_quantiles: DEFAULT_QUANTILES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureTransform {
    Quantile(QuantileTransformer),
    Standardize(Standardizer),
    Identity,
}

impl FeatureTransform {
    fn apply_value(&self, v: f64) -> f64 {
        match self {
            FeatureTransform::Quantile(q) => q.transform_value(v),
            FeatureTransform::Standardize(s) => (v - s.mean) / s.std,
            FeatureTransform::Identity => v,
        }
    }
}

/// Fitted per-feature transforms plus the optional regression target scaler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub features: Vec<FeatureTransform>,
    pub target: Option<TargetScaler>,
}

impl Preprocessor {
    /// Fit on `ds.train` only.
    pub fn fit(ds: &TabularDataset, policy: NumericPolicy, seed: u64) -> Result<Self> {
        let k = ds.k_num();
        let features = (0..k)
            .map(|j| {
                let col = ds.train.num_column(j, k);
                Ok(match policy {
                    NumericPolicy::Quantile { noise_std, max_quantiles } => FeatureTransform::Quantile(fit_quantile(
                        &col,
                        noise_std,
                        rng::derive_seed(seed, j as u64),
                        max_quantiles,
                    )?),
                    NumericPolicy::Standardize => FeatureTransform::Standardize(Standardizer::fit(&col)?),
                    NumericPolicy::Identity => FeatureTransform::Identity,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let target = match ds.task {
            TaskKind::Regression => Some(TargetScaler::fit(&ds.train.y)?),
            _ => None,
        };
        Ok(Preprocessor { features, target })
    }

    pub fn transform_split(&self, s: &mut Split) {
        let k = self.features.len();
        if k > 0 {
            for row in s.x_num.chunks_mut(k) {
                for (v, t) in row.iter_mut().zip(&self.features) {
                    *v = t.apply_value(*v);
                }
            }
        }
        if let Some(t) = &self.target {
            s.y = t.scale(&s.y);
        }
    }

    /// Transform every split in place with the fitted state.
    pub fn apply(&self, ds: &mut TabularDataset) {
        ds.for_each_split_mut(|s| self.transform_split(s));
    }
}
