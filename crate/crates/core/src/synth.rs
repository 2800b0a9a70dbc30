//! Synthetic regression tasks interpolating between an MLP-like target and
//! a random-tree-ensemble target.
//!
//! Inputs are `x ~ N(0, I_k)`; only the first `n_informative` features feed
//! the targets. `y = α·f_gbdt(x) + (1 − α)·f_dl(x)`, standardized with
//! training statistics.

use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Split, TabularDataset, TaskKind};
use crate::error::{Error, Result};
use crate::models::{FeatureLayout, FtTransformerConfig, ModelConfig, ModelSpec, ResNetConfig};
use crate::par::Exec;
use crate::preprocess::Standardizer;
use crate::rng::{self, Rng};
use crate::tensor::gemm;
use crate::training::{mean_std, train_new, TrainConfig};

const NONE: usize = usize::MAX;

/// Binary tree grown by repeatedly splitting a random shallow leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomTree {
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    /// Zero-based split feature; meaningless for leaves.
    pub feature: Vec<usize>,
    pub threshold: Vec<f64>,
    /// Set for leaves only.
    pub value: Vec<Option<f64>>,
    pub depth: Vec<usize>,
    pub leaves: Vec<usize>,
    /// Growth counter: two per split.
    pub n: usize,
}

pub const TREE_MAX_DEPTH: usize = 10;
pub const TREE_TARGET_N: usize = 100;
pub const FOREST_SIZE: usize = 30;

impl RandomTree {
    /// Grow until the counter reaches `target_n`. Each step picks a leaf of
    /// depth `< max_depth` uniformly, gives it a split on a uniform feature
    /// in `0..k` with a `N(0, 1)` threshold and two `N(0, 1)`-valued leaves.
    pub fn build(r: &mut Rng, k: usize, max_depth: usize, target_n: usize) -> Result<Self> {
        if k == 0 || target_n == 0 || max_depth == 0 {
            return Err(Error::Parameter("random tree needs k, depth and node target of at least 1".into()));
        }
        let mut t = RandomTree {
            left: vec![NONE],
            right: vec![NONE],
            feature: vec![0],
            threshold: vec![0.0],
            value: vec![None],
            depth: vec![0],
            leaves: vec![0],
            n: 0,
        };
        let mut eligible: Vec<usize> = Vec::new();
        while t.n < target_n {
            eligible.clear();
            eligible.extend((0..t.leaves.len()).filter(|&i| t.depth[t.leaves[i]] < max_depth));
            if eligible.is_empty() {
                return Err(Error::Parameter(format!("no leaf shallower than {max_depth} left to split")));
            }
            let pos = eligible[r.random_range(0..eligible.len())];
            let z = t.leaves.swap_remove(pos);
            t.feature[z] = r.random_range(0..k);
            t.threshold[z] = StandardNormal.sample(r);
            t.value[z] = None;
            let d = t.depth[z] + 1;
            let mut child = || {
                let v: f64 = StandardNormal.sample(r);
                t.left.push(NONE);
                t.right.push(NONE);
                t.feature.push(0);
                t.threshold.push(0.0);
                t.value.push(Some(v));
                t.depth.push(d);
                t.left.len() - 1
            };
            let (l, rr) = (child(), child());
            t.left[z] = l;
            t.right[z] = rr;
            t.leaves.push(l);
            t.leaves.push(rr);
            t.n += 2;
        }
        Ok(t)
    }

    pub fn n_nodes(&self) -> usize {
        self.left.len()
    }

    pub fn n_splits(&self) -> usize {
        self.left.iter().filter(|&&l| l != NONE).count()
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn max_depth(&self) -> usize {
        self.leaves.iter().map(|&l| self.depth[l]).max().unwrap_or(0)
    }

    /// `x[f] < t` goes left, otherwise right.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut z = 0;
        while self.left[z] != NONE {
            z = if x[self.feature[z]] < self.threshold[z] { self.left[z] } else { self.right[z] };
        }
        self.value[z].expect("leaves carry values")
    }

    /// Index of the leaf `x` lands in.
    pub fn leaf_of(&self, x: &[f64]) -> usize {
        let mut z = 0;
        while self.left[z] != NONE {
            z = if x[self.feature[z]] < self.threshold[z] { self.left[z] } else { self.right[z] };
        }
        z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub trees: Vec<RandomTree>,
}

impl RandomForest {
    pub fn build(r: &mut Rng, n_trees: usize, k: usize) -> Result<Self> {
        if n_trees == 0 {
            return Err(Error::Parameter("forest needs at least one tree".into()));
        }
        let trees = (0..n_trees)
            .map(|_| RandomTree::build(r, k, TREE_MAX_DEPTH, TREE_TARGET_N))
            .collect::<Result<_>>()?;
        Ok(RandomForest { trees })
    }

    /// Mean of the tree outputs.
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }

    /// Same as [`RandomForest::predict`] but visiting trees in `order`.
    pub fn predict_in_order(&self, x: &[f64], order: &[usize]) -> f64 {
        order.iter().map(|&i| self.trees[i].predict(x)).sum::<f64>() / self.trees.len() as f64
    }
}

/// Fixed untrained ReLU MLP with scalar output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomMlpTarget {
    /// `(weight [d_in, d_out], bias [d_out])` per layer.
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
    pub widths: Vec<usize>,
}

pub const TARGET_MLP_HIDDEN: [usize; 3] = [256, 256, 256];

impl RandomMlpTarget {
    /// Weights `N(0, 2/d_in)`, biases `U(−d_in^{−1/2}, d_in^{−1/2})`.
    pub fn build(r: &mut Rng, d_in: usize, hidden: &[usize]) -> Result<Self> {
        if d_in == 0 || hidden.contains(&0) {
            return Err(Error::Parameter("target MLP widths must be positive".into()));
        }
        let widths: Vec<usize> = std::iter::once(d_in).chain(hidden.iter().copied()).chain(std::iter::once(1)).collect();
        let layers = widths
            .windows(2)
            .map(|w| {
                let (a, b) = (w[0], w[1]);
                let normal = Normal::new(0.0, (2.0 / a as f64).sqrt()).expect("positive std");
                let weight: Vec<f64> = (0..a * b).map(|_| normal.sample(r)).collect();
                let bound = (a as f64).powf(-0.5);
                let bias: Vec<f64> = (0..b).map(|_| r.random_range(-bound..bound)).collect();
                (weight, bias)
            })
            .collect();
        Ok(RandomMlpTarget { layers, widths })
    }

    /// Outputs for row-major `x [n, d_in]`.
    pub fn predict_batch(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, ((w, b), win)) in self.layers.iter().zip(self.widths.windows(2)).enumerate() {
            let (a, c) = (win[0], win[1]);
            let mut out: Vec<f64> = b.repeat(n);
            gemm(n, a, c, &h, false, w, false, &mut out, true);
            if i != last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = out;
        }
        h
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.predict_batch(x, 1)[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_features: usize,
    pub n_informative: usize,
    pub n_trees: usize,
    pub data_seed: u64,
    pub tree_seed: u64,
    pub mlp_seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            n_train: 20_000,
            n_val: 2_000,
            n_test: 4_000,
            n_features: 100,
            n_informative: 50,
            n_trees: FOREST_SIZE,
            data_seed: 0,
            tree_seed: 0,
            mlp_seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    /// The 500k / 50k / 100k sizes of the full-scale benchmark.
    pub fn full_scale() -> Self {
        SyntheticTaskSpec { n_train: 500_000, n_val: 50_000, n_test: 100_000, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train < 2 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::config("synth.n_train", "need at least 2 train rows and non-empty val/test"));
        }
        if self.n_informative == 0 || self.n_informative > self.n_features {
            return Err(Error::config("synth.n_informative", "must lie in [1, n_features]"));
        }
        if self.n_trees == 0 {
            return Err(Error::config("synth.n_trees", "must be at least 1"));
        }
        Ok(())
    }
}

/// Inputs and both target functions, generated once and shared by every α.
#[derive(Debug, Clone)]
pub struct SyntheticGenerator {
    pub spec: SyntheticTaskSpec,
    pub forest: RandomForest,
    pub mlp: RandomMlpTarget,
    /// `[n_train + n_val + n_test, n_features]`, splits in that order.
    x: Vec<f64>,
    gbdt: Vec<f64>,
    dl: Vec<f64>,
}

impl SyntheticGenerator {
    pub fn new(spec: SyntheticTaskSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.n_train + spec.n_val + spec.n_test;
        let (k, ki) = (spec.n_features, spec.n_informative);
        let mut rx = rng::stream(spec.data_seed, rng::streams::SYNTH_X);
        let x: Vec<f64> = (0..n * k).map(|_| StandardNormal.sample(&mut rx)).collect();
        let forest = RandomForest::build(&mut rng::stream(spec.tree_seed, rng::streams::SYNTH_TREES), spec.n_trees, ki)?;
        let mlp = RandomMlpTarget::build(&mut rng::stream(spec.mlp_seed, rng::streams::SYNTH_MLP), ki, &TARGET_MLP_HIDDEN)?;
        let informative: Vec<f64> = x.chunks(k).flat_map(|row| row[..ki].iter().copied()).collect();
        let gbdt = informative.chunks(ki).map(|row| forest.predict(row)).collect();
        let dl = mlp.predict_batch(&informative, n);
        Ok(SyntheticGenerator { spec, forest, mlp, x, gbdt, dl })
    }

    /// Raw (unstandardized) `α·f_gbdt + (1 − α)·f_dl` for one input row.
    pub fn raw_target(&self, row: &[f64], alpha: f64) -> f64 {
        let ki = self.spec.n_informative;
        alpha * self.forest.predict(&row[..ki]) + (1.0 - alpha) * self.mlp.predict(&row[..ki])
    }

    /// The regression task for one `α`, targets standardized with training
    /// statistics.
    pub fn task(&self, alpha: f64) -> Result<TabularDataset> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::config("alpha", format!("{alpha} outside [0, 1]")));
        }
        let s = &self.spec;
        let k = s.n_features;
        let y: Vec<f64> = self.gbdt.iter().zip(&self.dl).map(|(g, d)| alpha * g + (1.0 - alpha) * d).collect();
        let scaler = Standardizer::fit(&y[..s.n_train])?;
        let y = scaler.apply(&y);
        let bounds = [0, s.n_train, s.n_train + s.n_val, s.n_train + s.n_val + s.n_test];
        let split = |i: usize| Split {
            n: bounds[i + 1] - bounds[i],
            x_num: self.x[bounds[i] * k..bounds[i + 1] * k].to_vec(),
            x_cat: Vec::new(),
            y: y[bounds[i]..bounds[i + 1]].to_vec(),
        };
        TabularDataset::new(
            (1..=k).map(|j| format!("x{j}")).collect(),
            Vec::new(),
            Vec::new(),
            TaskKind::Regression,
            split(0),
            split(1),
            split(2),
        )
    }
}

pub const DEFAULT_ALPHAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub model: String,
    pub seed: u64,
    pub test_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub alpha: f64,
    pub model: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

/// A named model entry of a sweep with its own optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepModel {
    pub name: String,
    pub config: ModelConfig,
    pub train: TrainConfig,
}

/// Desk-scale pair used when no sweep models are configured.
pub fn default_sweep_models() -> Vec<SweepModel> {
    let train = TrainConfig { lr: 1e-3, weight_decay: 1e-5, max_epochs: 40, patience: 6, exec: Exec::Sequential, ..Default::default() };
    vec![
        SweepModel {
            name: "resnet".into(),
            config: ModelConfig::Resnet(ResNetConfig { n_blocks: 2, d_main: 128, hidden_dropout: 0.2, ..Default::default() }),
            train: train.clone(),
        },
        SweepModel {
            name: "ft_transformer".into(),
            config: ModelConfig::FtTransformer(FtTransformerConfig {
                n_layers: 1,
                d_token: 32,
                n_heads: 4,
                attention_dropout: 0.1,
                ffn_dropout: 0.0,
                ..Default::default()
            }),
            train,
        },
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// Mean and population std per (α, model), in first-appearance order.
    pub fn summary(&self) -> Vec<SweepSummary> {
        let mut keys: Vec<(f64, String)> = Vec::new();
        for r in &self.rows {
            if !keys.iter().any(|(a, m)| *a == r.alpha && *m == r.model) {
                keys.push((r.alpha, r.model.clone()));
            }
        }
        keys.into_iter()
            .map(|(alpha, model)| {
                let v: Vec<f64> = self.rows.iter().filter(|r| r.alpha == alpha && r.model == model).map(|r| r.test_rmse).collect();
                let (mean, std) = mean_std(&v);
                SweepSummary { alpha, model, mean, std, n_seeds: v.len() }
            })
            .collect()
    }

    pub fn mean_rmse(&self, alpha: f64, model: &str) -> Option<f64> {
        self.summary().into_iter().find(|s| s.alpha == alpha && s.model == model).map(|s| s.mean)
    }

    pub fn write_rows_csv(&self, w: impl Write) -> Result<()> {
        write_csv(w, &self.rows)
    }

    pub fn write_summary_csv(&self, w: impl Write) -> Result<()> {
        write_csv(w, &self.summary())
    }

    pub fn save(&self, rows_path: impl AsRef<Path>, summary_path: impl AsRef<Path>) -> Result<()> {
        for (path, summary) in [(rows_path.as_ref(), false), (summary_path.as_ref(), true)] {
            let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            let w = std::io::BufWriter::new(f);
            if summary {
                self.write_summary_csv(w)?;
            } else {
                self.write_rows_csv(w)?;
            }
        }
        Ok(())
    }
}

fn write_csv<T: Serialize>(w: impl Write, rows: &[T]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    out.flush().map_err(|e| Error::Data(format!("csv: {e}")))
}

/// Train every model on every α task for every seed. Jobs run concurrently
/// under [`Exec::Parallel`]; each training run itself is sequential.
pub fn alpha_sweep(gen: &SyntheticGenerator, alphas: &[f64], models: &[SweepModel], seeds: &[u64], exec: Exec) -> Result<SweepResult> {
    if alphas.is_empty() || models.is_empty() || seeds.is_empty() {
        return Err(Error::config("sweep", "need at least one alpha, model and seed"));
    }
    let tasks = alphas.iter().map(|&a| gen.task(a)).collect::<Result<Vec<_>>>()?;
    let layout = FeatureLayout::numerical(gen.spec.n_features);
    let jobs: Vec<(usize, usize, u64)> = (0..alphas.len())
        .flat_map(|a| (0..models.len()).flat_map(move |m| seeds.iter().map(move |&s| (a, m, s))))
        .collect();
    let rows = exec.try_map(jobs.len(), |i| {
        let (a, m, seed) = jobs[i];
        let spec = ModelSpec { config: models[m].config.clone(), layout: layout.clone(), d_out: 1 };
        let cfg = TrainConfig { seed, exec: Exec::Sequential, target_std: None, ..models[m].train.clone() };
        let (_, report) = train_new(spec, &tasks[a], &cfg)?;
        Ok::<_, Error>(SweepRow { alpha: alphas[a], model: models[m].name.clone(), seed, test_rmse: report.test_metric.expect("train evaluates the test split") })
    })?;
    Ok(SweepResult { rows })
}
