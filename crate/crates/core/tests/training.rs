use rand::Rng as _;
use tabdl::data::{Split, TabularDataset, TaskKind};
use tabdl::metrics::{rmse, Metric};
use tabdl::models::{FeatureLayout, FtTransformerConfig, MlpConfig, Model, ModelConfig, ModelSpec, ResNetConfig};
use tabdl::param::ParamStore;
use tabdl::training::search::{mlp_space, resnet_space, ft_space, trial_from_sample};
use tabdl::training::{
    ensemble_predict, make_groups, mean_std, random_search, run_seeds, sample_config, train_new, AdamW, Decision, Dist,
    EarlyStopping, EnsembleOutput, HyperSpace, TrainConfig, ADAM_EPS, BETA1, BETA2,
};
use tabdl::{rng, Error, Exec, Tensor};

fn toy_regression(n: usize, k: usize, seed: u64) -> TabularDataset {
    let mut r = rng::seeded(seed);
    let mut make = |n: usize| {
        let x: Vec<f64> = (0..n * k).map(|_| r.random_range(-1.0..1.0)).collect();
        let y = x.chunks(k).map(|row| row[0] - 0.5 * row[1] + (row[0] * row[1]).sin()).collect();
        Split { n, x_num: x, x_cat: vec![], y }
    };
    let (train, val, test) = (make(n), make(n / 4), make(n / 4));
    TabularDataset::new((0..k).map(|j| format!("f{j}")).collect(), vec![], vec![], TaskKind::Regression, train, val, test).unwrap()
}

fn mlp_spec(k: usize) -> ModelSpec {
    ModelSpec {
        config: ModelConfig::Mlp(MlpConfig { layers: vec![16, 16], dropout: 0.1, d_embedding: 2 }),
        layout: FeatureLayout::numerical(k),
        d_out: 1,
    }
}

/// Plain Adam written out independently.
fn adam_oracle(p: &mut [f64], grads: &[Vec<f64>], lr: f64) {
    let (mut m, mut v) = (vec![0.0; p.len()], vec![0.0; p.len()]);
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        for i in 0..p.len() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            let mh = m[i] / (1.0 - BETA1.powi(t));
            let vh = v[i] / (1.0 - BETA2.powi(t));
            p[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
}

#[test]
fn adamw_without_decay_matches_adam() {
    let init = vec![0.3, -1.2, 2.0];
    let grads: Vec<Vec<f64>> = (0..10).map(|s| (0..3).map(|i| ((s * 3 + i) as f64 * 0.7).sin()).collect()).collect();
    let mut store = ParamStore::new();
    let id = store.add("w.weight", Tensor::vector(init.clone())).unwrap();
    let mut opt = AdamW::new(1e-2, 0.0).unwrap();
    for g in &grads {
        store.zero_grad();
        store.accumulate([(id, g.as_slice())]);
        opt.step(&mut store).unwrap();
    }
    let mut want = init;
    adam_oracle(&mut want, &grads, 1e-2);
    for (a, b) in store.tensor(id).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(opt.step_count(), 10);
}

#[test]
fn adamw_descends_a_quadratic() {
    let c = [1.0, -2.0, 0.5];
    let mut store = ParamStore::new();
    let id = store.add("w.weight", Tensor::vector(vec![0.0; 3])).unwrap();
    let mut opt = AdamW::new(0.05, 0.0).unwrap();
    let loss = |p: &[f64]| p.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let start = loss(store.tensor(id).data());
    for _ in 0..500 {
        let g: Vec<f64> = store.tensor(id).data().iter().zip(&c).map(|(a, b)| 2.0 * (a - b)).collect();
        store.zero_grad();
        store.accumulate([(id, g.as_slice())]);
        opt.step(&mut store).unwrap();
    }
    assert!(loss(store.tensor(id).data()) < 1e-3 * start);
}

#[test]
fn non_finite_gradient_is_named_and_nothing_moves() {
    let mut store = ParamStore::new();
    let a = store.add("a.weight", Tensor::vector(vec![1.0])).unwrap();
    let b = store.add("b.weight", Tensor::vector(vec![2.0])).unwrap();
    store.accumulate([(a, &[0.5][..]), (b, &[f64::NAN][..])]);
    let mut opt = AdamW::new(0.1, 0.0).unwrap();
    match opt.step(&mut store) {
        Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "b.weight"),
        other => panic!("expected a non-finite gradient error, got {other:?}"),
    }
    assert_eq!(store.tensor(a).data(), &[1.0]);
}

#[test]
fn training_is_deterministic_and_reads_test_once() {
    let ds = toy_regression(128, 4, 1);
    let cfg = TrainConfig { batch_size: 32, max_epochs: 6, lr: 3e-3, seed: 11, ..Default::default() };
    let (m1, r1) = train_new(mlp_spec(4), &ds, &cfg).unwrap();
    assert_eq!(ds.test_reads(), 1);
    let (m2, r2) = train_new(mlp_spec(4), &ds, &TrainConfig { exec: Exec::Sequential, ..cfg.clone() }).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(m1.params(), m2.params());
    assert_eq!(r1.epochs.len(), 6);
    assert!(r1.best_epoch >= 1 && r1.best_epoch <= 6);
    let best = r1.epochs.iter().map(|e| e.val_metric).fold(f64::INFINITY, f64::min);
    assert_eq!(r1.best_val_metric, best);

    let mut buf = Vec::new();
    r1.write_jsonl(&mut buf).unwrap();
    let lines: Vec<serde_json::Value> = String::from_utf8(buf).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 6);
    assert!(lines.iter().all(|l| l["timestamp"].is_number() && l["val_metric"].is_number()));
}

#[test]
fn every_family_trains_on_toy_data() {
    let ds = toy_regression(96, 3, 2);
    let configs = [
        ModelConfig::FtTransformer(FtTransformerConfig { n_layers: 1, d_token: 8, n_heads: 2, ..Default::default() }),
        ModelConfig::Resnet(ResNetConfig { n_blocks: 1, d_main: 8, ..Default::default() }),
        ModelConfig::Mlp(MlpConfig { layers: vec![8], dropout: 0.0, d_embedding: 2 }),
    ];
    for config in configs {
        let spec = ModelSpec { config, layout: FeatureLayout::numerical(3), d_out: 1 };
        let cfg = TrainConfig { batch_size: 32, max_epochs: 3, lr: 1e-3, ..Default::default() };
        let (_, r) = train_new(spec, &ds, &cfg).unwrap();
        assert!(r.test_metric.is_some_and(f64::is_finite));
    }
}

#[test]
fn early_stopping_exact_epoch_count() {
    // last improvement at epoch 5, patience 16 -> stop at 5 + 17 = 22
    let vals = |e: usize| if e <= 5 { e as f64 } else { 1.0 };
    let mut es = EarlyStopping::new(16, Metric::Accuracy);
    let stop = (1..).find(|&e| es.update(e, vals(e)) == Decision::Stop).unwrap();
    assert_eq!(stop, 22);
    assert_eq!(es.best(), Some((5, 5.0)));

    let mut es = EarlyStopping::new(0, Metric::Rmse);
    let seq = [3.0, 2.0, 1.0, 1.0];
    let stop = (1..).find(|&e| es.update(e, seq[e - 1]) == Decision::Stop).unwrap();
    assert_eq!(stop, 4);
}

#[test]
fn trainer_stops_patience_plus_one_after_best() {
    let ds = toy_regression(64, 3, 3);
    let cfg = TrainConfig { batch_size: 64, max_epochs: 500, patience: 2, lr: 5e-2, seed: 4, ..Default::default() };
    let (_, r) = train_new(mlp_spec(3), &ds, &cfg).unwrap();
    if r.stopped_early {
        assert_eq!(r.epochs.len(), r.best_epoch + 3);
    } else {
        assert_eq!(r.epochs.len(), 500);
    }
}

#[test]
fn divergence_is_reported() {
    let mut ds = toy_regression(32, 2, 5);
    ds.train.y.iter_mut().for_each(|y| *y = 1e300);
    let cfg = TrainConfig { batch_size: 16, max_epochs: 3, ..Default::default() };
    match train_new(mlp_spec(2), &ds, &cfg) {
        Err(Error::Divergence { epoch: 1, last_good_epoch: None }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn seed_summary_matches_oracle() {
    let ds = toy_regression(64, 3, 6);
    let cfg = TrainConfig { batch_size: 32, max_epochs: 2, lr: 1e-3, ..Default::default() };
    let runs = run_seeds(&mlp_spec(3), &ds, &cfg, &[1, 2, 3], Exec::Parallel).unwrap();
    assert_eq!(runs.models.len(), 3);
    let v = runs.test_metrics();
    let mean = (v[0] + v[1] + v[2]) / 3.0;
    let std = (((v[0] - mean).powi(2) + (v[1] - mean).powi(2) + (v[2] - mean).powi(2)) / 3.0).sqrt();
    let (m, s) = runs.summary();
    assert!((m - mean).abs() < 1e-15 && (s - std).abs() < 1e-15);
    assert_eq!(mean_std(&[2.0, 4.0]), (3.0, 1.0));
    let seq = run_seeds(&mlp_spec(3), &ds, &cfg, &[1, 2, 3], Exec::Sequential).unwrap();
    assert_eq!(seq.reports, runs.reports);
}

#[test]
fn ensembles_partition_and_do_not_hurt() {
    let ds = toy_regression(64, 3, 7);
    let groups = make_groups(15, 3).unwrap();
    let models: Vec<Model> = (0..15).map(|s| Model::new(mlp_spec(3), s).unwrap()).collect();
    let test = &ds.val;
    for g in &groups {
        let members: Vec<&Model> = g.iter().map(|&i| &models[i]).collect();
        let out = ensemble_predict(&members, TaskKind::Regression, &test.x_num, &[], test.n, 16, Exec::Parallel).unwrap();
        let ens = out.score(&test.y, None).unwrap();
        let mean_member: f64 = members
            .iter()
            .map(|m| rmse(&m.predict(&test.x_num, &[], test.n, 16, Exec::Sequential).unwrap(), &test.y).unwrap())
            .sum::<f64>()
            / members.len() as f64;
        assert!(ens <= mean_member + 1e-12);
    }
    // a group of identical members reproduces the member
    let one = &models[0];
    let out = ensemble_predict(&[one, one, one], TaskKind::Regression, &test.x_num, &[], test.n, 16, Exec::Sequential).unwrap();
    let single = one.predict(&test.x_num, &[], test.n, 16, Exec::Sequential).unwrap();
    match out {
        EnsembleOutput::Regression(p) => p.iter().zip(&single).for_each(|(a, b)| assert!((a - b).abs() < 1e-14)),
        _ => panic!("regression output expected"),
    }
}

#[test]
fn binary_ensemble_averages_probabilities() {
    let spec = ModelSpec { config: ModelConfig::Mlp(MlpConfig { layers: vec![4], dropout: 0.0, d_embedding: 2 }), layout: FeatureLayout::numerical(2), d_out: 1 };
    let (a, b) = (Model::new(spec.clone(), 1).unwrap(), Model::new(spec, 2).unwrap());
    let x = [0.3, -0.7, 1.1, 0.2];
    let out = ensemble_predict(&[&a, &b], TaskKind::Binclass, &x, &[], 2, 8, Exec::Sequential).unwrap();
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    let (za, zb) = (a.predict(&x, &[], 2, 8, Exec::Sequential).unwrap(), b.predict(&x, &[], 2, 8, Exec::Sequential).unwrap());
    match out {
        EnsembleOutput::Probabilities { n_classes: 2, probs } => {
            for i in 0..2 {
                let p = (sig(za[i]) + sig(zb[i])) / 2.0;
                assert!((probs[2 * i + 1] - p).abs() < 1e-12 && (probs[2 * i] - (1.0 - p)).abs() < 1e-12);
            }
        }
        other => panic!("unexpected {other:?}"),
    }
}

const DRAWS: usize = 10_000;

#[test]
fn sampler_const_and_uniform_int() {
    let mut r = rng::seeded(1);
    assert!((0..100).all(|_| Dist::constant(0.25).sample(&mut r) == 0.25));
    let d = Dist::uniform_int(1, 8);
    let mut counts = [0usize; 8];
    for _ in 0..DRAWS {
        let v = d.sample(&mut r);
        assert!(d.contains(v));
        counts[v as usize - 1] += 1;
    }
    let (p, n) = (1.0 / 8.0, DRAWS as f64);
    let sigma = (n * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - n * p).abs() < 5.0 * sigma, "{counts:?}");
    }
}

#[test]
fn sampler_log_uniform_ks() {
    let (lo, hi) = (1e-5, 1e-3);
    let d = Dist::log_uniform(lo, hi);
    let mut r = rng::seeded(2);
    let mut u: Vec<f64> = (0..DRAWS).map(|_| (d.sample(&mut r).ln() - lo.ln()) / (hi.ln() - lo.ln())).collect();
    u.sort_by(f64::total_cmp);
    let n = DRAWS as f64;
    let ks = u.iter().enumerate().map(|(i, &x)| ((i + 1) as f64 / n - x).max(x - i as f64 / n)).fold(0.0, f64::max);
    assert!(ks < 1.628 / n.sqrt(), "KS statistic {ks}");
}

#[test]
fn sampler_zero_mixture() {
    let d = Dist::zero_or(Dist::uniform(0.0, 0.5));
    let mut r = rng::seeded(3);
    let draws: Vec<f64> = (0..DRAWS).map(|_| d.sample(&mut r)).collect();
    let zeros = draws.iter().filter(|&&v| v == 0.0).count() as f64;
    let n = DRAWS as f64;
    assert!((zeros - n / 2.0).abs() < 5.0 * (n * 0.25).sqrt());
    assert!(draws.iter().all(|&v| d.contains(v)));
}

#[test]
fn search_spaces_realize_valid_configs() {
    let mut r = rng::seeded(4);
    for (family, space) in [("ft_transformer", ft_space()), ("resnet", resnet_space()), ("mlp", mlp_space())] {
        for _ in 0..200 {
            let s = sample_config(&space, &mut r);
            for (k, d) in &space.params {
                assert!(d.contains(s[k]), "{family} {k} = {}", s[k]);
            }
            let t = trial_from_sample(family, &s).unwrap();
            t.config.validate().unwrap();
            assert!(t.lr > 0.0);
        }
    }
}

#[test]
fn random_search_records_every_trial() {
    let space = HyperSpace::new(vec![("x", Dist::uniform(-1.0, 1.0)), ("n", Dist::uniform_int(0, 3))]);
    let res = random_search(&space, 12, 9, Metric::Rmse, Exec::Parallel, |i, s| {
        if i == 3 {
            Err(Error::Data("boom".into()))
        } else {
            Ok(s["x"].powi(2) + s["n"])
        }
    })
    .unwrap();
    assert_eq!(res.trials.len(), 12);
    assert!(res.trials[3].score.is_none() && res.trials[3].error.is_some());
    let best = res.trials.iter().filter_map(|t| t.score).fold(f64::INFINITY, f64::min);
    assert_eq!(res.best_trial().score, Some(best));
    let again = random_search(&space, 12, 9, Metric::Rmse, Exec::Sequential, |_, s| Ok(s["x"].powi(2) + s["n"])).unwrap();
    assert_eq!(again.trials.iter().map(|t| &t.sample).collect::<Vec<_>>(), res.trials.iter().map(|t| &t.sample).collect::<Vec<_>>());
    assert!(random_search(&space, 0, 9, Metric::Rmse, Exec::Sequential, |_, _| Ok(0.0)).is_err());
}
