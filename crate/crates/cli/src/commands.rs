//! Subcommand implementations. Each returns the manifest path on success.

use std::path::PathBuf;

use serde_json::json;
use tabdl::data::{load_csv, split_dataset, TabularDataset, TaskKind};
use tabdl::explain::{
    attention_importance, correlation_reports, integrated_gradients, permutation_importance, ImportanceVector, Method,
};
use tabdl::metrics::Metric;
use tabdl::models::{load_checkpoint, save_checkpoint, FeatureLayout, Model, ModelConfig, ModelSpec};
use tabdl::preprocess::Preprocessor;
use tabdl::synth::{alpha_sweep, default_sweep_models, SyntheticGenerator};
use tabdl::training::search::{space_for, trial_from_sample};
use tabdl::training::{fit, mean_std, random_search, run_seeds, train_new, TrainConfig, TrainReport};
use tabdl::{Error, Exec, Result};

use crate::config::{DatasetConfig, RunConfig};
use crate::output::{sha256_hex, RunDir};

/// Dataset plus the regression target std used to report original units.
fn load_dataset(cfg: &RunConfig) -> Result<(TabularDataset, Option<f64>)> {
    match &cfg.dataset {
        None => Err(Error::config("dataset", "no dataset configured")),
        Some(DatasetConfig::Csv { path, schema, split, split_seed, preprocessing }) => {
            let table = load_csv(path, schema)?;
            let idx = split_dataset(table.n_rows, *split, *split_seed)?;
            let mut ds = TabularDataset::from_table(&table, &idx)?;
            let pre = Preprocessor::fit(&ds, *preprocessing, *split_seed)?;
            pre.apply(&mut ds);
            Ok((ds, pre.target.as_ref().map(|t| t.std())))
        }
        Some(DatasetConfig::Synthetic { spec, alpha }) => Ok((SyntheticGenerator::new(spec.clone())?.task(*alpha)?, None)),
    }
}

fn model_config(cfg: &RunConfig) -> Result<ModelConfig> {
    cfg.model.as_ref().ok_or_else(|| Error::config("model", "no model configured; pass --model or set model"))?.resolve()
}

fn train_config(cfg: &RunConfig, target_std: Option<f64>) -> TrainConfig {
    TrainConfig { target_std, exec: Exec::Parallel, ..cfg.train.clone() }
}

/// Save under a name derived from the checkpoint bytes.
fn save_addressed(run: &mut RunDir, model: &Model, seed: u64) -> Result<PathBuf> {
    let dir = run.path("checkpoints");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let tmp = dir.join(format!("seed{seed}.partial"));
    save_checkpoint(model, &tmp)?;
    let bytes = std::fs::read(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let name = format!("{}-seed{seed}-{}.ckpt", model.spec().config.family(), &sha256_hex(&bytes)[..16]);
    let path = dir.join(name);
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    run.record(path.clone());
    Ok(path)
}

fn write_metrics_jsonl(run: &mut RunDir, reports: &[TrainReport]) -> Result<()> {
    let mut buf = Vec::new();
    for r in reports {
        r.write_jsonl(&mut buf).map_err(|e| Error::io(run.path("metrics.jsonl"), e))?;
    }
    run.write("metrics.jsonl", &buf)?;
    Ok(())
}

fn summary_csv(reports: &[TrainReport]) -> String {
    let mut s = String::from("seed,n_params,best_epoch,best_val_metric,test_metric\n");
    for r in reports {
        let test = r.test_metric.map(|v| v.to_string()).unwrap_or_default();
        s += &format!("{},{},{},{},{}\n", r.seed, r.n_params, r.best_epoch, r.best_val_metric, test);
    }
    let tests: Vec<f64> = reports.iter().filter_map(|r| r.test_metric).collect();
    let (mean, std) = mean_std(&tests);
    s += &format!("mean,,,,{mean}\nstd,,,,{std}\n");
    s
}

pub fn train(cfg: &RunConfig) -> Result<PathBuf> {
    let config = model_config(cfg)?;
    let seeds = cfg.seeds.resolve();
    let mut run = RunDir::create(cfg.out_dir())?;
    let (ds, target_std) = run.time("load", || load_dataset(cfg))?;
    let spec = ModelSpec { config, layout: FeatureLayout::of(&ds), d_out: ds.task.output_dim() };
    let n_params = Model::new(spec.clone(), 0)?.n_params();
    eprintln!("{}: {n_params} parameters", spec.config.family());
    let tc = train_config(cfg, target_std);
    let runs = run.time("train", || run_seeds(&spec, &ds, &tc, &seeds, Exec::Parallel))?;
    if ds.test_reads() != seeds.len() {
        return Err(Error::Contract(format!("test split read {} times for {} seeds", ds.test_reads(), seeds.len())));
    }
    write_metrics_jsonl(&mut run, &runs.reports)?;
    for (m, s) in runs.models.iter().zip(&seeds) {
        save_addressed(&mut run, m, *s)?;
    }
    run.write("summary.csv", summary_csv(&runs.reports).as_bytes())?;
    let (mean, std) = runs.summary();
    let metrics = json!({
        "n_params": n_params,
        "metric": Metric::for_task(ds.task).name(),
        "test_mean": mean,
        "test_std": std,
        "per_seed": runs.reports.iter().map(|r| json!({"seed": r.seed, "best_epoch": r.best_epoch, "test": r.test_metric})).collect::<Vec<_>>(),
        "test_reads": ds.test_reads(),
    });
    eprintln!("test {}: {mean:.6} ± {std:.6}", Metric::for_task(ds.task).name());
    run.finish("train", cfg, metrics)
}

pub fn synth(cfg: &RunConfig) -> Result<PathBuf> {
    let seeds = cfg.seeds.resolve();
    let models = if cfg.synth.models.is_empty() { default_sweep_models() } else { cfg.synth.models.clone() };
    let mut run = RunDir::create(cfg.out_dir())?;
    let gen = run.time("generate", || SyntheticGenerator::new(cfg.synth.spec.clone()))?;
    let result = run.time("sweep", || alpha_sweep(&gen, &cfg.synth.alphas, &models, &seeds, Exec::Parallel))?;
    let mut rows = Vec::new();
    result.write_rows_csv(&mut rows)?;
    run.write("sweep_rows.csv", &rows)?;
    let mut summary = Vec::new();
    result.write_summary_csv(&mut summary)?;
    run.write("summary.csv", &summary)?;
    let metrics = json!({ "summary": result.summary() });
    run.finish("synth", cfg, metrics)
}

/// Rows of the training split used for attribution.
fn sample_rows(ds: &TabularDataset, n: usize) -> tabdl::data::Split {
    let rows: Vec<usize> = (0..n.min(ds.train.n)).collect();
    ds.train.select(&rows, ds.k_num(), ds.k_cat())
}

fn integrated_gradients_rows(model: &Model, split: &tabdl::data::Split, task: TaskKind, steps: usize, exec: Exec) -> Result<ImportanceVector> {
    let k = model.spec().layout.k_num;
    let base = vec![0.0; k];
    let per_row = exec.try_map(split.n, |i| {
        let target = if matches!(task, TaskKind::Multiclass { .. }) { split.y[i] as usize } else { 0 };
        integrated_gradients(model, &split.x_num[i * k..(i + 1) * k], &[], &base, steps, target)
    })?;
    let mut scores = vec![0.0; k];
    for (v, _) in &per_row {
        scores.iter_mut().zip(&v.scores).for_each(|(s, x)| *s += x.abs());
    }
    scores.iter_mut().for_each(|s| *s /= split.n.max(1) as f64);
    Ok(ImportanceVector { method: Method::Ig, scores })
}

pub fn explain(cfg: &RunConfig) -> Result<PathBuf> {
    let methods = cfg.explain.methods.iter().map(|m| Method::parse(m)).collect::<Result<Vec<_>>>()?;
    if methods.is_empty() {
        return Err(Error::config("explain.methods", "need at least one method"));
    }
    let mut run = RunDir::create(cfg.out_dir())?;
    let (ds, target_std) = run.time("load", || load_dataset(cfg))?;
    let model = match &cfg.explain.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => {
            let spec = ModelSpec { config: model_config(cfg)?, layout: FeatureLayout::of(&ds), d_out: ds.task.output_dim() };
            if methods.contains(&Method::Am) && spec.config.family() != "ft_transformer" {
                return Err(Error::Unsupported(format!("attention maps need an ft_transformer, not {}", spec.config.family())));
            }
            let seed = cfg.seeds.resolve()[0];
            let tc = TrainConfig { seed, ..train_config(cfg, target_std) };
            let (m, report) = run.time("train", || train_new(spec, &ds, &tc))?;
            write_metrics_jsonl(&mut run, std::slice::from_ref(&report))?;
            save_addressed(&mut run, &m, seed)?;
            m
        }
    };
    if model.spec().layout != FeatureLayout::of(&ds) || model.d_out() != ds.task.output_dim() {
        return Err(Error::config("explain.checkpoint", "checkpoint does not match the dataset's features or task"));
    }
    if methods.contains(&Method::Am) && model.spec().config.family() != "ft_transformer" {
        return Err(Error::Unsupported(format!("attention maps need an ft_transformer, not {}", model.spec().config.family())));
    }
    let sample = sample_rows(&ds, cfg.explain.n_samples);
    if sample.n == 0 {
        return Err(Error::config("explain.n_samples", "must be at least 1"));
    }
    let names: Vec<String> = ds.num_names.iter().chain(&ds.cat_names).cloned().collect();
    let e = &cfg.explain;
    let mut vectors = Vec::new();
    for m in methods {
        let v = run.time(m.name(), || match m {
            Method::Am => attention_importance(&model, &sample.x_num, &sample.x_cat, sample.n, cfg.train.eval_batch_size, Exec::Parallel).map(|(v, _)| v),
            Method::Ig => integrated_gradients_rows(&model, &sample, ds.task, e.ig_steps, Exec::Parallel),
            Method::Pt => permutation_importance(&model, &sample, ds.task, e.seed, e.pt_repeats, cfg.train.eval_batch_size, Exec::Parallel).map(|(v, _)| v),
        })?;
        let mut buf = Vec::new();
        v.write_csv(&names, &mut buf)?;
        run.write(&format!("importances_{}.csv", m.name()), &buf)?;
        vectors.push(v);
    }
    let reports = correlation_reports(&vectors, sample.n, e.seed)?;
    let text = serde_json::to_string_pretty(&reports).map_err(|e| Error::Data(e.to_string()))?;
    run.write("correlation.json", format!("{text}\n").as_bytes())?;
    let metrics = json!({ "n_samples": sample.n, "correlations": reports });
    run.finish("explain", cfg, metrics)
}

pub fn tune(cfg: &RunConfig) -> Result<PathBuf> {
    let family = model_config(cfg)?.family();
    let space = space_for(family)?;
    if cfg.tune.budget == 0 {
        return Err(Error::config("tune.budget", "need at least one trial"));
    }
    let mut run = RunDir::create(cfg.out_dir())?;
    let (ds, target_std) = run.time("load", || load_dataset(cfg))?;
    let layout = FeatureLayout::of(&ds);
    let metric = Metric::for_task(ds.task);
    let base = TrainConfig { seed: cfg.tune.seed, exec: Exec::Sequential, ..train_config(cfg, target_std) };
    let result = run.time("search", || {
        random_search(&space, cfg.tune.budget, cfg.tune.seed, metric, Exec::Parallel, |_, sample| {
            let t = trial_from_sample(family, sample)?;
            let spec = ModelSpec { config: t.config, layout: layout.clone(), d_out: ds.task.output_dim() };
            let tc = TrainConfig { lr: t.lr, weight_decay: t.weight_decay, ..base.clone() };
            let (_, report) = fit(Model::new(spec, tc.seed)?, &ds, &tc)?;
            Ok(report.best_val_metric)
        })
    })?;
    if ds.test_reads() != 0 {
        return Err(Error::Contract("tuning read the test split".into()));
    }
    let mut log = String::new();
    for t in &result.trials {
        let realized = trial_from_sample(family, &t.sample).ok();
        log += &format!("{}\n", json!({ "index": t.index, "sample": t.sample, "score": t.score, "error": t.error, "trial": realized }));
    }
    run.write("trials.jsonl", log.as_bytes())?;
    let best = result.best_trial();
    let best_json = json!({
        "index": best.index,
        "score": best.score,
        "metric": metric.name(),
        "sample": best.sample,
        "trial": trial_from_sample(family, &best.sample)?,
    });
    let text = serde_json::to_string_pretty(&best_json).map_err(|e| Error::Data(e.to_string()))?;
    run.write("best.json", format!("{text}\n").as_bytes())?;
    let metrics = json!({ "best_index": best.index, "best_score": best.score, "n_trials": result.trials.len(), "test_reads": ds.test_reads() });
    run.finish("tune", cfg, metrics)
}
