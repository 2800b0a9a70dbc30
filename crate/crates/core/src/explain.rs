//! Feature importances: averaged CLS attention maps, Integrated Gradients
//! and permutation tests, plus Spearman rank correlation.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Split, TaskKind};
use crate::error::{Error, Result};
use crate::metrics::Metric;
use crate::models::{ForwardCtx, Model};
use crate::par::Exec;
use crate::rng;
use crate::tensor::{Tape, Tensor};
use crate::training::score_outputs;

pub const DEFAULT_IG_STEPS: usize = 64;
pub const DEFAULT_PT_REPEATS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Am,
    Ig,
    Pt,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Am => "am",
            Method::Ig => "ig",
            Method::Pt => "pt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "am" => Ok(Method::Am),
            "ig" => Ok(Method::Ig),
            "pt" => Ok(Method::Pt),
            other => Err(Error::config("methods", format!("unknown attribution method `{other}`"))),
        }
    }
}

/// One score per feature, numerical features first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub method: Method,
    pub scores: Vec<f64>,
}

impl ImportanceVector {
    /// Average ranks, 1 for the highest score.
    pub fn ranks(&self) -> Vec<f64> {
        let neg: Vec<f64> = self.scores.iter().map(|v| -v).collect();
        average_ranks(&neg)
    }

    /// Mean score over `range` of feature indices.
    pub fn mean_over(&self, range: std::ops::Range<usize>) -> f64 {
        let n = range.len() as f64;
        self.scores[range].iter().sum::<f64>() / n
    }

    /// CSV with columns `feature, score, rank`.
    pub fn write_csv(&self, names: &[String], w: impl Write) -> Result<()> {
        if names.len() != self.scores.len() {
            return Err(Error::shape("one feature name per score required"));
        }
        #[derive(Serialize)]
        struct Row<'a> {
            feature: &'a str,
            score: f64,
            rank: f64,
        }
        let mut out = csv::Writer::from_writer(w);
        for ((name, &score), rank) in names.iter().zip(&self.scores).zip(self.ranks()) {
            out.serialize(Row { feature: name, score, rank }).map_err(|e| Error::Data(format!("csv: {e}")))?;
        }
        out.flush().map_err(|e| Error::Data(format!("csv: {e}")))
    }

    pub fn save_csv(&self, names: &[String], path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(names, std::io::BufWriter::new(f))
    }
}

/// Work done by an attribution call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    /// Rows pushed through the model.
    pub forward_rows: usize,
    /// Full split evaluations (permutation test only).
    pub evaluations: usize,
}

/// Per-sample CLS-query rows averaged over layers and heads, CLS key
/// included at index 0: `[n, k + 1]`.
pub fn attention_maps(model: &Model, x_num: &[f64], x_cat: &[usize], n: usize, batch_size: usize, exec: Exec) -> Result<Vec<Vec<f64>>> {
    let (k, c) = (model.spec().layout.k_num, model.spec().layout.k_cat());
    if x_num.len() != n * k || x_cat.len() != n * c {
        return Err(Error::shape("attention input does not match the feature layout"));
    }
    let bs = batch_size.max(1);
    let parts = exec.try_map(n.div_ceil(bs), |i| {
        let (lo, hi) = (i * bs, ((i + 1) * bs).min(n));
        let (_, records) = model.forward_eval_with_attention(&x_num[lo * k..hi * k], &x_cat[lo * c..hi * c], hi - lo, Exec::Sequential)?;
        let t = k + c + 1;
        let mut maps = vec![vec![0.0; t]; hi - lo];
        let mut count = 0usize;
        for r in &records {
            count += r.n_heads;
            for (b, m) in maps.iter_mut().enumerate() {
                for h in 0..r.n_heads {
                    m.iter_mut().zip(r.row(b, h)).for_each(|(a, v)| *a += v);
                }
            }
        }
        let count = count.max(1) as f64;
        maps.iter_mut().flatten().for_each(|v| *v /= count);
        Ok::<_, Error>(maps)
    })?;
    Ok(parts.concat())
}

/// Average CLS attention over heads and layers per sample, drop the CLS
/// column, renormalize over features, then average over samples.
pub fn attention_importance(
    model: &Model,
    x_num: &[f64],
    x_cat: &[usize],
    n: usize,
    batch_size: usize,
    exec: Exec,
) -> Result<(ImportanceVector, Cost)> {
    if n == 0 {
        return Err(Error::Data("attention importance needs at least one sample".into()));
    }
    let maps = attention_maps(model, x_num, x_cat, n, batch_size, exec)?;
    let k = maps[0].len() - 1;
    let mut scores = vec![0.0; k];
    for m in &maps {
        let mass: f64 = m[1..].iter().sum();
        scores.iter_mut().zip(&m[1..]).for_each(|(s, v)| *s += v / mass);
    }
    scores.iter_mut().for_each(|s| *s /= n as f64);
    Ok((ImportanceVector { method: Method::Am, scores }, Cost { forward_rows: n, evaluations: 0 }))
}

/// Integrated Gradients of output column `target` for one numerical input
/// row, trapezoid rule over `steps` intervals.
pub fn integrated_gradients(
    model: &Model,
    x: &[f64],
    x_cat: &[usize],
    baseline: &[f64],
    steps: usize,
    target: usize,
) -> Result<(ImportanceVector, Cost)> {
    let layout = &model.spec().layout;
    let k = layout.k_num;
    if layout.k_cat() > 0 {
        return Err(Error::Unsupported("integrated gradients cover numerical-only inputs".into()));
    }
    if x.len() != k || baseline.len() != k || !x_cat.is_empty() {
        return Err(Error::shape(format!("input and baseline must have {k} numerical features")));
    }
    if steps == 0 {
        return Err(Error::config("steps", "must be at least 1"));
    }
    if target >= model.d_out() {
        return Err(Error::config("target", format!("output column {target} out of range")));
    }
    const CHUNK: usize = 64;
    let mut total = vec![0.0; k];
    let mut s0 = 0;
    while s0 <= steps {
        let s1 = (s0 + CHUNK - 1).min(steps);
        let rows = s1 - s0 + 1;
        let mut path = Vec::with_capacity(rows * k);
        for s in s0..=s1 {
            let a = s as f64 / steps as f64;
            path.extend(baseline.iter().zip(x).map(|(b, v)| b + a * (v - b)));
        }
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::new(vec![rows, k], path)?.with_grad());
        let out = model.forward(&mut tape, xv, &[], &mut ForwardCtx::eval())?;
        let mut pick = vec![0.0; model.d_out()];
        pick[target] = 1.0;
        let pick = tape.constant(vec![model.d_out(), 1], pick)?;
        let col = tape.matmul(out, pick)?;
        let f = tape.sum(col);
        let grads = tape.backward(f)?;
        let g = grads.get(xv).ok_or_else(|| Error::Contract("input gradient missing".into()))?;
        for (s, row) in (s0..=s1).zip(g.chunks(k)) {
            let w = if s == 0 || s == steps { 0.5 } else { 1.0 };
            total.iter_mut().zip(row).for_each(|(t, v)| *t += w * v);
        }
        s0 = s1 + 1;
    }
    let scores = total.iter().zip(x.iter().zip(baseline)).map(|(g, (v, b))| (v - b) * g / steps as f64).collect();
    Ok((ImportanceVector { method: Method::Ig, scores }, Cost { forward_rows: steps + 1, evaluations: 0 }))
}

/// Mean IG over several rows of a split (zero baseline by default).
pub fn integrated_gradients_mean_abs(model: &Model, split: &Split, baseline: Option<&[f64]>, steps: usize, target: usize, exec: Exec) -> Result<(ImportanceVector, Cost)> {
    let k = model.spec().layout.k_num;
    if split.n == 0 {
        return Err(Error::Data("integrated gradients need at least one row".into()));
    }
    let zero = vec![0.0; k];
    let base = baseline.unwrap_or(&zero);
    let per_row = exec.try_map(split.n, |i| integrated_gradients(model, &split.x_num[i * k..(i + 1) * k], &[], base, steps, target))?;
    let mut scores = vec![0.0; k];
    let mut cost = Cost::default();
    for (v, c) in &per_row {
        scores.iter_mut().zip(&v.scores).for_each(|(s, x)| *s += x.abs());
        cost.forward_rows += c.forward_rows;
    }
    scores.iter_mut().for_each(|s| *s /= split.n as f64);
    Ok((ImportanceVector { method: Method::Ig, scores }, cost))
}

/// Metric degradation when each feature column is shuffled within `split`,
/// averaged over `repeats` seeded shuffles. Feature `j`, repeat `r` uses its
/// own derived stream, so results do not depend on `exec`.
pub fn permutation_importance(
    model: &Model,
    split: &Split,
    task: TaskKind,
    seed: u64,
    repeats: usize,
    batch_size: usize,
    exec: Exec,
) -> Result<(ImportanceVector, Cost)> {
    if split.n == 0 {
        return Err(Error::Data("permutation importance needs a non-empty split".into()));
    }
    if repeats == 0 {
        return Err(Error::config("repeats", "must be at least 1"));
    }
    let (kn, kc) = (model.spec().layout.k_num, model.spec().layout.k_cat());
    let metric = Metric::for_task(task);
    let score = |x_num: &[f64], x_cat: &[usize]| -> Result<f64> {
        let out = model.predict(x_num, x_cat, split.n, batch_size, Exec::Sequential)?;
        score_outputs(task, &out, &split.y, None)
    };
    let base = score(&split.x_num, &split.x_cat)?;
    let per_feature = exec.try_map(kn + kc, |j| {
        let mut sum = 0.0;
        for r in 0..repeats {
            let mut order: Vec<usize> = (0..split.n).collect();
            let tag = rng::derive_seed(j as u64, r as u64);
            order.shuffle(&mut rng::stream(rng::derive_seed(seed, tag), rng::streams::PERMUTATION));
            let (mut xn, mut xc) = (split.x_num.clone(), split.x_cat.clone());
            if j < kn {
                for (row, &src) in order.iter().enumerate() {
                    xn[row * kn + j] = split.x_num[src * kn + j];
                }
            } else {
                let jc = j - kn;
                for (row, &src) in order.iter().enumerate() {
                    xc[row * kc + jc] = split.x_cat[src * kc + jc];
                }
            }
            sum += metric.degradation(base, score(&xn, &xc)?);
        }
        Ok::<_, Error>(sum / repeats as f64)
    })?;
    let evaluations = (kn + kc) * repeats + 1;
    Ok((ImportanceVector { method: Method::Pt, scores: per_feature }, Cost { forward_rows: evaluations * split.n, evaluations }))
}

/// Ranks starting at 1 in ascending order; ties share their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            ranks[p] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("spearman inputs differ in length"));
    }
    if a.len() < 2 {
        return Err(Error::Data("spearman needs at least two items".into()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Data("spearman is undefined for a constant score vector".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCorrelationReport {
    pub method_a: Method,
    pub method_b: Method,
    pub rho: f64,
    pub n_samples: usize,
    pub seed: u64,
}

/// Spearman ρ for every pair of the given importance vectors.
pub fn correlation_reports(vectors: &[ImportanceVector], n_samples: usize, seed: u64) -> Result<Vec<RankCorrelationReport>> {
    let mut out = Vec::new();
    for (i, a) in vectors.iter().enumerate() {
        for b in &vectors[i + 1..] {
            out.push(RankCorrelationReport { method_a: a.method, method_b: b.method, rho: spearman(&a.scores, &b.scores)?, n_samples, seed });
        }
    }
    Ok(out)
}
