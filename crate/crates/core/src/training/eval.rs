use crate::data::{Split, TaskKind};
use crate::error::Result;
use crate::metrics::{accuracy, rmse, Metric};
use crate::models::Model;
use crate::par::Exec;

/// Class decisions from raw model outputs: a positive logit for binary
/// tasks, the arg-max row entry for multiclass.
pub fn outputs_to_labels(task: TaskKind, outputs: &[f64]) -> Vec<usize> {
    match task {
        TaskKind::Multiclass { n_classes } => outputs.chunks(n_classes).map(argmax).collect(),
        _ => outputs.iter().map(|&z| usize::from(z > 0.0)).collect(),
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Task metric of raw outputs against `y`. Regression RMSE is multiplied by
/// `target_std` so that it is reported in original target units.
pub fn score_outputs(task: TaskKind, outputs: &[f64], y: &[f64], target_std: Option<f64>) -> Result<f64> {
    match Metric::for_task(task) {
        Metric::Rmse => Ok(rmse(outputs, y)? * target_std.unwrap_or(1.0)),
        Metric::Accuracy => {
            let labels: Vec<usize> = y.iter().map(|&v| v as usize).collect();
            accuracy(&outputs_to_labels(task, outputs), &labels)
        }
    }
}

pub fn evaluate(
    model: &Model,
    split: &Split,
    task: TaskKind,
    batch_size: usize,
    exec: Exec,
    target_std: Option<f64>,
) -> Result<f64> {
    let out = model.predict(&split.x_num, &split.x_cat, split.n, batch_size, exec)?;
    score_outputs(task, &out, &split.y, target_std)
}
