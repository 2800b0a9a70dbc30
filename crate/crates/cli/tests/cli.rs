use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tabdl::training::search::space_for;

fn tabdl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tabdl"))
        .args(args)
        .current_dir(dir)
        .env_remove("TABDL_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn tiny_synthetic() -> Value {
    json!({ "source": "synthetic", "spec": { "n_train": 200, "n_val": 50, "n_test": 50 }, "alpha": 0.5 })
}

fn tiny_ft() -> Value {
    json!({ "family": "ft_transformer", "n_layers": 1, "d_token": 8, "n_heads": 2, "attention_dropout": 0.0, "ffn_dropout": 0.0 })
}

#[test]
fn train_writes_one_checkpoint_and_row_per_seed() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.json", &json!({ "dataset": tiny_synthetic(), "train.max_epochs": 3, "train.lr": 1e-3 }));
    let o = tabdl(d.path(), &["train", "--config", cfg.to_str().unwrap(), "--model", "mlp", "--seeds", "3", "--out", "run"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = d.path().join("run");
    let ckpts: Vec<_> = std::fs::read_dir(run.join("checkpoints")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(ckpts.len(), 3);
    assert!(ckpts.iter().all(|n| n.starts_with("mlp-seed") && n.ends_with(".ckpt")));

    let mut rdr = csv::Reader::from_path(run.join("summary.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    let seeds: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(seeds, ["0", "1", "2", "mean", "std"]);
    let tests: Vec<f64> = rows[..3].iter().map(|r| r[4].parse().unwrap()).collect();
    let mean: f64 = rows[3][4].parse().unwrap();
    assert!((mean - tests.iter().sum::<f64>() / 3.0).abs() < 1e-12);

    let lines: Vec<Value> = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 9);
    assert!(lines.iter().all(|l| l["epoch"].is_u64() && l["val_metric"].is_f64() && l["timestamp"].is_f64()));

    let m = read_json(&run.join("manifest.json"));
    assert_eq!(m["command"], "train");
    assert_eq!(m["metrics"]["test_reads"], 3);
    assert_eq!(m["resolved_config"]["train"]["max_epochs"], 3);
    for a in m["artifacts"].as_array().unwrap() {
        assert!(run.join(a.as_str().unwrap()).exists(), "{a}");
    }
}

#[test]
fn manifest_replay_reproduces_metrics() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.json", &json!({ "dataset": tiny_synthetic(), "train.max_epochs": 2, "seeds": 2, "out": "a" }));
    let o = tabdl(d.path(), &["train", "--config", cfg.to_str().unwrap(), "--model", "resnet"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let first = read_json(&d.path().join("a/manifest.json"));
    let o = tabdl(d.path(), &["train", "--config", "a/manifest.json", "--out", "b"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let second = read_json(&d.path().join("b/manifest.json"));
    assert_eq!(first["metrics"], second["metrics"]);
    assert_eq!(
        std::fs::read(d.path().join("a/summary.csv")).unwrap(),
        std::fs::read(d.path().join("b/summary.csv")).unwrap()
    );
}

#[test]
fn default_ft_transformer_reports_parameter_count() {
    let d = tempfile::tempdir().unwrap();
    let ds = json!({ "source": "synthetic", "spec": { "n_train": 32, "n_val": 8, "n_test": 8 } });
    let cfg = write_config(d.path(), "c.json", &json!({ "dataset": ds, "train.max_epochs": 1, "train.batch_size": 32 }));
    let o = tabdl(d.path(), &["train", "--config", cfg.to_str().unwrap(), "--model", "ft_transformer", "--preset", "default", "--out", "r"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let n = read_json(&d.path().join("r/manifest.json"))["metrics"]["n_params"].as_f64().unwrap();
    assert!((n - 929_000.0).abs() / 929_000.0 < 0.005, "{n}");
    assert!(stderr(&o).contains(&format!("{n} parameters")));
}

fn write_csv_dataset(dir: &Path) -> Value {
    let mut s = String::from("a,b,city,y\n");
    for i in 0..150 {
        let a = (i as f64 * 0.37).sin();
        let b = (i % 17) as f64 / 4.0;
        let city = ["x", "y", "z"][i % 3];
        let y = 2.0 * a - b + if city == "z" { 1.0 } else { 0.0 };
        s += &format!("{a},{b},{city},{y}\n");
    }
    std::fs::write(dir.join("data.csv"), s).unwrap();
    json!({
        "source": "csv",
        "path": "data.csv",
        "schema": {
            "columns": [
                { "name": "a", "kind": "numerical" },
                { "name": "b", "kind": "numerical" },
                { "name": "city", "kind": "categorical" },
                { "name": "y", "kind": "target" }
            ],
            "task": { "kind": "regression" }
        },
        "split_seed": 3
    })
}

#[test]
fn csv_dataset_trains_and_reads_test_once() {
    let d = tempfile::tempdir().unwrap();
    let ds = write_csv_dataset(d.path());
    let cfg = write_config(d.path(), "c.json", &json!({ "dataset": ds, "train.max_epochs": 2, "model": { "family": "mlp", "layers": [8] } }));
    let o = tabdl(d.path(), &["train", "--config", cfg.to_str().unwrap(), "--out", "r"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = read_json(&d.path().join("r/manifest.json"));
    assert_eq!(m["metrics"]["test_reads"], 1);
    assert!(m["metrics"]["test_mean"].as_f64().unwrap().is_finite());
}

#[test]
fn user_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let mut ds = write_csv_dataset(d.path());
    ds["path"] = json!("missing.csv");
    let cfg = write_config(d.path(), "missing.json", &json!({ "dataset": ds, "model": { "family": "mlp", "layers": [8] } }));
    let o = tabdl(d.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing.csv"));

    let cfg = write_config(d.path(), "typo.json", &json!({ "train.lrr": 0.1 }));
    let o = tabdl(d.path(), &["train", "--config", cfg.to_str().unwrap(), "--model", "mlp"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train.lrr"), "{}", stderr(&o));

    let o = tabdl(d.path(), &["train", "--model", "transformerz"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("transformerz"));

    let o = tabdl(d.path(), &["train", "--seeds", "two"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn divergence_exits_3() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(
        d.path(),
        "c.json",
        &json!({ "dataset": tiny_synthetic(), "train.max_epochs": 3, "train.lr": 1e100, "model": { "family": "mlp", "layers": [16, 16, 16] } }),
    );
    let o = tabdl(d.path(), &["train", "--config", cfg.to_str().unwrap(), "--out", "r"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
}

fn synth_config(dir: &Path) -> PathBuf {
    let spec = json!({ "n_train": 150, "n_val": 40, "n_test": 40 });
    let train = json!({ "max_epochs": 2, "lr": 1e-3, "exec": "sequential" });
    write_config(
        dir,
        "synth.json",
        &json!({
            "seeds": 2,
            "synth": {
                "spec": spec,
                "models": [
                    { "name": "mlp", "config": { "family": "mlp", "layers": [16] }, "train": train },
                    { "name": "ft", "config": tiny_ft(), "train": train }
                ]
            }
        }),
    )
}

#[test]
fn synth_single_alpha_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let cfg = synth_config(d.path());
    for out in ["a", "b"] {
        let o = tabdl(d.path(), &["synth", "--config", cfg.to_str().unwrap(), "--alphas", "0", "--out", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = std::fs::read(d.path().join("a/summary.csv")).unwrap();
    assert_eq!(a, std::fs::read(d.path().join("b/summary.csv")).unwrap());
    let mut rdr = csv::Reader::from_reader(a.as_slice());
    assert_eq!(rdr.headers().unwrap(), vec!["alpha", "model", "mean", "std", "n_seeds"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r[0].parse::<f64>().unwrap() == 0.0 && &r[4] == "2"));
    let mut rdr = csv::Reader::from_path(d.path().join("a/sweep_rows.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["alpha", "model", "seed", "test_rmse"]);
    assert_eq!(rdr.records().count(), 4);
}

#[test]
fn synth_default_alpha_grid_gives_five_rows_per_model() {
    let d = tempfile::tempdir().unwrap();
    let cfg = synth_config(d.path());
    let o = tabdl(d.path(), &["synth", "--config", cfg.to_str().unwrap(), "--seeds", "1", "--out", "r"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(d.path().join("r/summary.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 10);
    for model in ["mlp", "ft"] {
        let alphas: Vec<f64> = rows.iter().filter(|r| &r[1] == model).map(|r| r[0].parse().unwrap()).collect();
        assert_eq!(alphas, [0.0, 0.25, 0.5, 0.75, 1.0]);
    }
}

#[test]
fn explain_writes_one_csv_per_method_and_a_report() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(
        d.path(),
        "c.json",
        &json!({
            "dataset": tiny_synthetic(),
            "model": tiny_ft(),
            "train.max_epochs": 2,
            "explain": { "n_samples": 20, "ig_steps": 8, "pt_repeats": 2 }
        }),
    );
    let o = tabdl(d.path(), &["explain", "--config", cfg.to_str().unwrap(), "--out", "r"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = d.path().join("r");
    for m in ["am", "ig", "pt"] {
        let mut rdr = csv::Reader::from_path(run.join(format!("importances_{m}.csv"))).unwrap();
        assert_eq!(rdr.headers().unwrap(), vec!["feature", "score", "rank"]);
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 100);
        assert_eq!(&rows[0][0], "x1");
        assert!(rows.iter().all(|r| r[1].parse::<f64>().unwrap().is_finite()));
    }
    let report = read_json(&run.join("correlation.json"));
    let report = report.as_array().unwrap();
    assert_eq!(report.len(), 3);
    for r in report {
        let rho = r["rho"].as_f64().unwrap();
        assert!((-1.0..=1.0).contains(&rho));
        assert_eq!(r["n_samples"], 20);
    }
    assert_eq!(read_json(&run.join("manifest.json"))["command"], "explain");
}

#[test]
fn explain_reuses_a_checkpoint_and_gates_attention_maps() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "t.json", &json!({ "dataset": tiny_synthetic(), "train.max_epochs": 1, "model": { "family": "mlp", "layers": [8] } }));
    let o = tabdl(d.path(), &["train", "--config", cfg.to_str().unwrap(), "--out", "t"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = std::fs::read_dir(d.path().join("t/checkpoints")).unwrap().next().unwrap().unwrap().path();

    let explain = |name: &str, methods: Value| {
        let cfg = write_config(
            d.path(),
            name,
            &json!({ "dataset": tiny_synthetic(), "explain": { "checkpoint": ckpt, "methods": methods, "n_samples": 10, "ig_steps": 4, "pt_repeats": 1 } }),
        );
        tabdl(d.path(), &["explain", "--config", cfg.to_str().unwrap(), "--out", name.trim_end_matches(".json")])
    };
    let o = explain("am.json", json!(["am"]));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("unsupported"), "{}", stderr(&o));

    let o = explain("ok.json", json!(["ig", "pt"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(d.path().join("ok/importances_ig.csv").exists());
    assert!(!d.path().join("ok/importances_am.csv").exists());
    assert_eq!(read_json(&d.path().join("ok/correlation.json")).as_array().unwrap().len(), 1);
}

#[test]
fn tune_logs_every_trial_inside_the_space() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.json", &json!({ "dataset": tiny_synthetic(), "train.max_epochs": 2 }));
    let o = tabdl(d.path(), &["tune", "--config", cfg.to_str().unwrap(), "--model", "mlp", "--budget", "0", "--out", "z"]);
    assert_eq!(code(&o), 2);

    let o = tabdl(d.path(), &["tune", "--config", cfg.to_str().unwrap(), "--model", "mlp", "--budget", "3", "--out", "r"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let space = space_for("mlp").unwrap();
    let log = std::fs::read_to_string(d.path().join("r/trials.jsonl")).unwrap();
    let trials: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(trials.len(), 3);
    for t in &trials {
        for (name, v) in t["sample"].as_object().unwrap() {
            let dist = space.get(name).unwrap_or_else(|| panic!("unknown hyperparameter {name}"));
            assert!(dist.contains(v.as_f64().unwrap()), "{name} = {v}");
        }
    }
    let best = read_json(&d.path().join("r/best.json"));
    let best_score = best["score"].as_f64().unwrap();
    let scores: Vec<f64> = trials.iter().filter_map(|t| t["score"].as_f64()).collect();
    assert!(scores.iter().all(|&s| best_score <= s));
    assert_eq!(read_json(&d.path().join("r/manifest.json"))["metrics"]["test_reads"], 0);
}

#[test]
fn thread_cap_from_the_environment() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.json", &json!({ "dataset": tiny_synthetic(), "train.max_epochs": 1, "seeds": 2 }));
    let o = Command::new(env!("CARGO_BIN_EXE_tabdl"))
        .args(["train", "--config", cfg.to_str().unwrap(), "--model", "mlp", "--out", "r"])
        .current_dir(d.path())
        .env("TABDL_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read_json(&d.path().join("r/manifest.json"))["resolved_config"]["threads"], 1);
}
