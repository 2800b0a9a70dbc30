use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::early_stopping::{Decision, EarlyStopping};
use super::eval::evaluate;
use super::optim::AdamW;
use crate::data::{TabularDataset, TaskKind};
use crate::error::{Error, Result};
use crate::metrics::Metric;
use crate::models::{ForwardCtx, Model, ModelSpec};
use crate::par::Exec;
use crate::rng;
use crate::tensor::{ParamId, Tape};

pub const DEFAULT_PATIENCE: usize = 16;
pub const DEFAULT_MAX_EPOCHS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Execution mode for evaluation passes.
    pub exec: Exec,
    /// Regression metrics are reported in original units when set.
    pub target_std: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            eval_batch_size: 1024,
            patience: DEFAULT_PATIENCE,
            max_epochs: DEFAULT_MAX_EPOCHS,
            lr: 1e-4,
            weight_decay: 1e-5,
            seed: 0,
            exec: Exec::default(),
            target_std: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs", "must be at least 1"));
        }
        AdamW::new(self.lr, self.weight_decay).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub family: String,
    pub seed: u64,
    pub n_params: usize,
    pub metric: Metric,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    /// Computed once, from the restored best-epoch parameters; `None` when
    /// the run never touched the test split.
    pub test_metric: Option<f64>,
    pub stopped_early: bool,
}

impl TrainReport {
    /// One JSON object per epoch with a wall-clock `timestamp` (Unix seconds).
    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for r in &self.epochs {
            let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
            let line = serde_json::json!({
                "seed": self.seed,
                "epoch": r.epoch,
                "train_loss": r.train_loss,
                "val_metric": r.val_metric,
                "timestamp": ts,
            });
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_jsonl(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }
}

/// Build a model from `spec` seeded with `cfg.seed` and train it.
pub fn train_new(spec: ModelSpec, ds: &TabularDataset, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    let model = Model::new(spec, cfg.seed)?;
    train(model, ds, cfg)
}

/// Train until early stopping or the epoch cap, restore the best-epoch
/// parameters, then evaluate the test split once.
pub fn train(model: Model, ds: &TabularDataset, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    let (best, mut report) = fit(model, ds, cfg)?;
    report.test_metric = Some(evaluate(&best, ds.test(), ds.task, cfg.eval_batch_size, cfg.exec, cfg.target_std)?);
    Ok((best, report))
}

/// [`train`] without the final test evaluation; the test split is never read.
pub fn fit(mut model: Model, ds: &TabularDataset, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    if ds.train.n == 0 || ds.val.n == 0 {
        return Err(Error::Data("training needs non-empty train and val splits".into()));
    }
    if model.d_out() != ds.task.output_dim() {
        return Err(Error::config("d_out", "model output width does not match the task"));
    }
    let metric = Metric::for_task(ds.task);
    let mut stopper = EarlyStopping::new(cfg.patience, metric);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay)?;
    let mut dropout_rng = rng::stream(cfg.seed, rng::streams::DROPOUT);
    let (k_num, k_cat) = (ds.k_num(), ds.k_cat());
    let mut best = model.clone();
    let mut epochs = Vec::new();
    let mut last_good = None;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..ds.train.n).collect();
        order.shuffle(&mut rng::stream(rng::derive_seed(cfg.seed, epoch as u64), rng::streams::BATCH_ORDER));
        let mut loss_sum = 0.0;
        for rows in order.chunks(cfg.batch_size) {
            let batch = ds.train.select(rows, k_num, k_cat);
            let (loss, grads, updates) = {
                let mut tape = Tape::with_exec(Exec::Sequential);
                let x = tape.constant(vec![batch.n, k_num], batch.x_num)?;
                let mut ctx = ForwardCtx::train(&mut dropout_rng);
                let out = model.forward(&mut tape, x, &batch.x_cat, &mut ctx)?;
                let loss = match ds.task {
                    TaskKind::Regression => tape.mse(out, &batch.y)?,
                    TaskKind::Binclass => tape.bce_with_logits(out, &batch.y)?,
                    TaskKind::Multiclass { .. } => {
                        let labels: Vec<usize> = batch.y.iter().map(|&v| v as usize).collect();
                        tape.cross_entropy(out, &labels)?
                    }
                };
                let value = tape.value(loss)[0];
                if !value.is_finite() {
                    return Err(Error::Divergence { epoch, last_good_epoch: last_good });
                }
                let grads = tape.backward(loss)?;
                let owned: Vec<(ParamId, Vec<f64>)> = grads.param_grads(&tape).map(|(id, g)| (id, g.to_vec())).collect();
                (value, owned, ctx.running_updates)
            };
            loss_sum += loss * rows.len() as f64;
            let params = model.params_mut();
            params.zero_grad();
            params.accumulate(grads.iter().map(|(id, g)| (*id, g.as_slice())));
            opt.step(params)?;
            model.apply_running_updates(&updates)?;
        }
        let val = evaluate(&model, &ds.val, ds.task, cfg.eval_batch_size, cfg.exec, cfg.target_std)?;
        if !val.is_finite() {
            return Err(Error::Divergence { epoch, last_good_epoch: last_good });
        }
        epochs.push(EpochRecord { epoch, train_loss: loss_sum / ds.train.n as f64, val_metric: val });
        last_good = Some(epoch);
        match stopper.update(epoch, val) {
            Decision::Improved => best = model.clone(),
            Decision::Continue => {}
            Decision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_epoch, best_val_metric) = stopper.best().expect("at least one epoch ran");
    best.params_mut().zero_grad();
    let report = TrainReport {
        family: best.spec().config.family().to_string(),
        seed: cfg.seed,
        n_params: best.n_params(),
        metric,
        epochs,
        best_epoch,
        best_val_metric,
        test_metric: None,
        stopped_early,
    };
    Ok((best, report))
}

/// Mean and population (ddof = 0) standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone)]
pub struct SeedRuns {
    pub models: Vec<Model>,
    pub reports: Vec<TrainReport>,
}

impl SeedRuns {
    pub fn test_metrics(&self) -> Vec<f64> {
        self.reports.iter().filter_map(|r| r.test_metric).collect()
    }

    /// `(mean, std)` of the test metric across seeds.
    pub fn summary(&self) -> (f64, f64) {
        mean_std(&self.test_metrics())
    }
}

/// One independent run per seed (model init, batch order and dropout all
/// follow the seed). Runs execute concurrently under [`Exec::Parallel`].
pub fn run_seeds(spec: &ModelSpec, ds: &TabularDataset, cfg: &TrainConfig, seeds: &[u64], exec: Exec) -> Result<SeedRuns> {
    if seeds.is_empty() {
        return Err(Error::config("seeds", "need at least one seed"));
    }
    let runs = exec.try_map(seeds.len(), |i| {
        let cfg = TrainConfig { seed: seeds[i], exec: Exec::Sequential, ..cfg.clone() };
        train_new(spec.clone(), ds, &cfg)
    })?;
    let (models, reports) = runs.into_iter().unzip();
    Ok(SeedRuns { models, reports })
}
