//! Random search over declared hyperparameter distributions.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Metric;
use crate::models::{FtTransformerConfig, MlpConfig, ModelConfig, ResNetConfig};
use crate::par::Exec;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case", deny_unknown_fields)]
pub enum Dist {
    UniformInt { low: i64, high: i64 },
    Uniform { low: f64, high: f64 },
    LogUniform { low: f64, high: f64 },
    Const { value: f64 },
    /// Exactly 0 with probability 1/2, otherwise a draw from `inner`.
    ZeroOr { inner: Box<Dist> },
}

impl Dist {
    pub fn uniform_int(low: i64, high: i64) -> Self {
        Dist::UniformInt { low, high }
    }

    pub fn uniform(low: f64, high: f64) -> Self {
        Dist::Uniform { low, high }
    }

    pub fn log_uniform(low: f64, high: f64) -> Self {
        Dist::LogUniform { low, high }
    }

    pub fn constant(value: f64) -> Self {
        Dist::Const { value }
    }

    pub fn zero_or(inner: Dist) -> Self {
        Dist::ZeroOr { inner: Box::new(inner) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |r: &str| Err(Error::config("space", r.to_string()));
        match self {
            Dist::UniformInt { low, high } if low > high => bad("UniformInt needs low <= high"),
            Dist::Uniform { low, high } if !(low <= high) => bad("Uniform needs low <= high"),
            Dist::LogUniform { low, high } if !(0.0 < *low && low <= high) => bad("LogUniform needs 0 < low <= high"),
            Dist::Const { value } if !value.is_finite() => bad("Const must be finite"),
            Dist::ZeroOr { inner } => inner.validate(),
            _ => Ok(()),
        }
    }

    pub fn sample(&self, r: &mut Rng) -> f64 {
        match self {
            Dist::UniformInt { low, high } => r.random_range(*low..=*high) as f64,
            Dist::Uniform { low, high } => {
                if low == high {
                    *low
                } else {
                    r.random_range(*low..*high)
                }
            }
            Dist::LogUniform { low, high } => {
                let (a, b) = (low.ln(), high.ln());
                if a == b {
                    *low
                } else {
                    r.random_range(a..b).exp().clamp(*low, *high)
                }
            }
            Dist::Const { value } => *value,
            Dist::ZeroOr { inner } => {
                if r.random_bool(0.5) {
                    0.0
                } else {
                    inner.sample(r)
                }
            }
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        match self {
            Dist::UniformInt { low, high } => v.fract() == 0.0 && (*low as f64..=*high as f64).contains(&v),
            Dist::Uniform { low, high } | Dist::LogUniform { low, high } => (*low..=*high).contains(&v),
            Dist::Const { value } => v == *value,
            Dist::ZeroOr { inner } => v == 0.0 || inner.contains(v),
        }
    }
}

/// Named distributions, sampled in declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperSpace {
    pub params: Vec<(String, Dist)>,
}

pub type Sample = BTreeMap<String, f64>;

impl HyperSpace {
    pub fn new(params: Vec<(&str, Dist)>) -> Self {
        HyperSpace { params: params.into_iter().map(|(k, d)| (k.to_string(), d)).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.iter().try_for_each(|(_, d)| d.validate())
    }

    pub fn get(&self, name: &str) -> Option<&Dist> {
        self.params.iter().find(|(k, _)| k == name).map(|(_, d)| d)
    }

    /// Override or add one distribution.
    pub fn set(&mut self, name: &str, dist: Dist) {
        match self.params.iter_mut().find(|(k, _)| k == name) {
            Some(slot) => slot.1 = dist,
            None => self.params.push((name.to_string(), dist)),
        }
    }
}

pub fn sample_config(space: &HyperSpace, r: &mut Rng) -> Sample {
    space.params.iter().map(|(k, d)| (k.clone(), d.sample(r))).collect()
}

/// FT-Transformer search space.
pub fn ft_space() -> HyperSpace {
    HyperSpace::new(vec![
        ("n_layers", Dist::uniform_int(1, 4)),
        ("d_token", Dist::uniform_int(64, 512)),
        ("residual_dropout", Dist::zero_or(Dist::uniform(0.0, 0.2))),
        ("attention_dropout", Dist::uniform(0.0, 0.5)),
        ("ffn_dropout", Dist::uniform(0.0, 0.5)),
        ("ffn_factor", Dist::uniform(2.0 / 3.0, 8.0 / 3.0)),
        ("lr", Dist::log_uniform(1e-5, 1e-3)),
        ("weight_decay", Dist::log_uniform(1e-6, 1e-3)),
    ])
}

pub fn resnet_space() -> HyperSpace {
    HyperSpace::new(vec![
        ("n_blocks", Dist::uniform_int(1, 8)),
        ("d_main", Dist::uniform_int(64, 512)),
        ("hidden_factor", Dist::uniform(1.0, 4.0)),
        ("hidden_dropout", Dist::uniform(0.0, 0.5)),
        ("residual_dropout", Dist::zero_or(Dist::uniform(0.0, 0.5))),
        ("lr", Dist::log_uniform(1e-5, 1e-2)),
        ("weight_decay", Dist::zero_or(Dist::log_uniform(1e-6, 1e-3))),
        ("d_embedding", Dist::uniform_int(64, 512)),
    ])
}

/// The first and last layer sizes are drawn separately; all in-between
/// layers share `middle_size`.
pub fn mlp_space() -> HyperSpace {
    HyperSpace::new(vec![
        ("n_layers", Dist::uniform_int(1, 8)),
        ("first_size", Dist::uniform_int(1, 512)),
        ("middle_size", Dist::uniform_int(1, 512)),
        ("last_size", Dist::uniform_int(1, 512)),
        ("dropout", Dist::zero_or(Dist::uniform(0.0, 0.5))),
        ("lr", Dist::log_uniform(1e-5, 1e-2)),
        ("weight_decay", Dist::zero_or(Dist::log_uniform(1e-6, 1e-3))),
        ("d_embedding", Dist::uniform_int(64, 512)),
    ])
}

pub fn space_for(family: &str) -> Result<HyperSpace> {
    match family {
        "ft_transformer" | "ft" => Ok(ft_space()),
        "resnet" => Ok(resnet_space()),
        "mlp" => Ok(mlp_space()),
        other => Err(Error::config("model", format!("unknown model family `{other}`"))),
    }
}

/// A model configuration plus optimizer settings realized from a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub config: ModelConfig,
    pub lr: f64,
    pub weight_decay: f64,
}

fn take(s: &Sample, key: &str) -> Result<f64> {
    s.get(key).copied().ok_or_else(|| Error::config(key, "missing from hyperparameter sample"))
}

fn take_usize(s: &Sample, key: &str) -> Result<usize> {
    let v = take(s, key)?;
    if v < 0.0 || v.fract() != 0.0 {
        return Err(Error::config(key, format!("expected a nonnegative integer, got {v}")));
    }
    Ok(v as usize)
}

/// FT-Transformer heads are fixed at 8, so `d_token` is rounded to the
/// nearest multiple of 8.
pub const FT_SEARCH_HEADS: usize = 8;

pub fn trial_from_sample(family: &str, s: &Sample) -> Result<Trial> {
    let config = match family {
        "ft_transformer" | "ft" => {
            let d = take_usize(s, "d_token")?;
            let d = (((d as f64) / FT_SEARCH_HEADS as f64).round() as usize).max(1) * FT_SEARCH_HEADS;
            ModelConfig::FtTransformer(FtTransformerConfig {
                n_layers: take_usize(s, "n_layers")?,
                d_token: d,
                n_heads: FT_SEARCH_HEADS,
                ffn_factor: take(s, "ffn_factor")?,
                attention_dropout: take(s, "attention_dropout")?,
                ffn_dropout: take(s, "ffn_dropout")?,
                residual_dropout: take(s, "residual_dropout")?,
                token_bias: true,
            })
        }
        "resnet" => ModelConfig::Resnet(ResNetConfig {
            n_blocks: take_usize(s, "n_blocks")?,
            d_main: take_usize(s, "d_main")?,
            hidden_factor: take(s, "hidden_factor")?,
            hidden_dropout: take(s, "hidden_dropout")?,
            residual_dropout: take(s, "residual_dropout")?,
            d_embedding: take_usize(s, "d_embedding")?,
        }),
        "mlp" => {
            let n = take_usize(s, "n_layers")?;
            let (first, middle, last) = (take_usize(s, "first_size")?, take_usize(s, "middle_size")?, take_usize(s, "last_size")?);
            let layers = match n {
                0 => Vec::new(),
                1 => vec![first],
                _ => std::iter::once(first)
                    .chain(std::iter::repeat_n(middle, n - 2))
                    .chain(std::iter::once(last))
                    .collect(),
            };
            ModelConfig::Mlp(MlpConfig { layers, dropout: take(s, "dropout")?, d_embedding: take_usize(s, "d_embedding")? })
        }
        other => return Err(Error::config("model", format!("unknown model family `{other}`"))),
    };
    config.validate()?;
    Ok(Trial { config, lr: take(s, "lr")?, weight_decay: take(s, "weight_decay")? })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub index: usize,
    pub sample: Sample,
    /// Validation score; `None` when the trial failed.
    pub score: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub trials: Vec<TrialResult>,
    pub best: usize,
}

impl SearchResult {
    pub fn best_trial(&self) -> &TrialResult {
        &self.trials[self.best]
    }
}

/// Draw `budget` samples from one seeded stream, evaluate each with
/// `objective` (concurrently under [`Exec::Parallel`]) and keep the best
/// by validation score. Failed trials are recorded and skipped.
pub fn random_search<F>(space: &HyperSpace, budget: usize, seed: u64, metric: Metric, exec: Exec, objective: F) -> Result<SearchResult>
where
    F: Fn(usize, &Sample) -> Result<f64> + Sync + Send,
{
    space.validate()?;
    if budget == 0 {
        return Err(Error::config("budget", "need at least one trial"));
    }
    let mut r = rng::stream(seed, rng::streams::SEARCH);
    let samples: Vec<Sample> = (0..budget).map(|_| sample_config(space, &mut r)).collect();
    let outcomes = exec.map(budget, |i| objective(i, &samples[i]));
    let mut trials = Vec::with_capacity(budget);
    let mut best: Option<(usize, f64)> = None;
    for (i, (sample, outcome)) in samples.into_iter().zip(outcomes).enumerate() {
        let (score, error) = match outcome {
            Ok(v) if v.is_finite() => (Some(v), None),
            Ok(v) => (None, Some(format!("non-finite score {v}"))),
            Err(e) => (None, Some(e.to_string())),
        };
        if let Some(v) = score {
            if best.is_none_or(|(_, b)| metric.improves(v, b)) {
                best = Some((i, v));
            }
        }
        trials.push(TrialResult { index: i, sample, score, error });
    }
    let best = best.ok_or_else(|| Error::Data("every search trial failed".into()))?.0;
    Ok(SearchResult { trials, best })
}
