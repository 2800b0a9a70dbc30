use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, rmse};
use crate::models::Model;
use crate::par::Exec;
use crate::tensor::{sigmoid, softmax_in_place};

use super::eval::argmax;

/// Split `n_models` consecutive indices into `n_groups` disjoint groups of
/// equal size.
pub fn make_groups(n_models: usize, n_groups: usize) -> Result<Vec<Vec<usize>>> {
    if n_groups == 0 || n_models == 0 || !n_models.is_multiple_of(n_groups) {
        return Err(Error::config(
            "ensemble",
            format!("{n_models} models cannot form {n_groups} equal groups"),
        ));
    }
    let size = n_models / n_groups;
    Ok((0..n_groups).map(|g| (g * size..(g + 1) * size).collect()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnsembleOutput {
    Regression(Vec<f64>),
    /// Row-major `[n, n_classes]` averaged class probabilities.
    Probabilities { n_classes: usize, probs: Vec<f64> },
}

impl EnsembleOutput {
    pub fn labels(&self) -> Option<Vec<usize>> {
        match self {
            EnsembleOutput::Probabilities { n_classes, probs } => Some(probs.chunks(*n_classes).map(argmax).collect()),
            EnsembleOutput::Regression(_) => None,
        }
    }

    /// RMSE (scaled by `target_std` when given) or accuracy against `y`.
    pub fn score(&self, y: &[f64], target_std: Option<f64>) -> Result<f64> {
        match self {
            EnsembleOutput::Regression(p) => Ok(rmse(p, y)? * target_std.unwrap_or(1.0)),
            EnsembleOutput::Probabilities { .. } => {
                let labels: Vec<usize> = y.iter().map(|&v| v as usize).collect();
                accuracy(&self.labels().expect("classification output"), &labels)
            }
        }
    }
}

/// Per-row class probabilities from raw outputs; binary logits become
/// `[1 - p, p]`.
pub fn class_probabilities(task: TaskKind, outputs: &[f64]) -> Vec<f64> {
    match task {
        TaskKind::Multiclass { n_classes } => {
            let mut p = outputs.to_vec();
            p.chunks_mut(n_classes).for_each(softmax_in_place);
            p
        }
        _ => outputs
            .iter()
            .flat_map(|&z| {
                let p = sigmoid(z);
                [1.0 - p, p]
            })
            .collect(),
    }
}

/// Average member predictions: raw outputs for regression, class
/// probabilities for classification.
pub fn ensemble_predict(
    models: &[&Model],
    task: TaskKind,
    x_num: &[f64],
    x_cat: &[usize],
    n: usize,
    batch_size: usize,
    exec: Exec,
) -> Result<EnsembleOutput> {
    if models.is_empty() {
        return Err(Error::config("ensemble", "empty model group"));
    }
    let member = models
        .iter()
        .map(|m| {
            let out = m.predict(x_num, x_cat, n, batch_size, exec)?;
            Ok(match task {
                TaskKind::Regression => out,
                _ => class_probabilities(task, &out),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut avg = vec![0.0; member[0].len()];
    for p in &member {
        avg.iter_mut().zip(p).for_each(|(a, v)| *a += v);
    }
    let k = models.len() as f64;
    avg.iter_mut().for_each(|a| *a /= k);
    Ok(match task {
        TaskKind::Regression => EnsembleOutput::Regression(avg),
        TaskKind::Binclass => EnsembleOutput::Probabilities { n_classes: 2, probs: avg },
        TaskKind::Multiclass { n_classes } => EnsembleOutput::Probabilities { n_classes, probs: avg },
    })
}
