//! Task metrics.

use serde::{Deserialize, Serialize};

use crate::data::TaskKind;
use crate::error::{Error, Result};

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape(format!("rmse: {} predictions vs {} targets", pred.len(), target.len())));
    }
    let mse = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt())
}

pub fn accuracy(pred_labels: &[usize], target: &[usize]) -> Result<f64> {
    if pred_labels.len() != target.len() || pred_labels.is_empty() {
        return Err(Error::shape(format!("accuracy: {} predictions vs {} targets", pred_labels.len(), target.len())));
    }
    let hits = pred_labels.iter().zip(target).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred_labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Rmse,
    Accuracy,
}

impl Metric {
    pub fn for_task(task: TaskKind) -> Self {
        if task.is_classification() {
            Metric::Accuracy
        } else {
            Metric::Rmse
        }
    }

    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::Accuracy)
    }

    /// Strict improvement of `candidate` over `best`.
    pub fn improves(self, candidate: f64, best: f64) -> bool {
        if self.higher_is_better() {
            candidate > best
        } else {
            candidate < best
        }
    }

    /// Degradation of `perturbed` relative to `base`, positive when worse.
    pub fn degradation(self, base: f64, perturbed: f64) -> f64 {
        if self.higher_is_better() {
            base - perturbed
        } else {
            perturbed - base
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Rmse => "rmse",
            Metric::Accuracy => "accuracy",
        }
    }
}
