use rand::Rng as _;
use tabdl::data::{Split, TaskKind};
use tabdl::explain::{
    attention_importance, attention_maps, integrated_gradients, permutation_importance, spearman, Method,
};
use tabdl::models::{FeatureLayout, FtTransformerConfig, MlpConfig, Model, ModelConfig, ModelSpec};
use tabdl::{rng, Error, Exec};

fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::seeded(seed);
    (0..n).map(|_| r.random_range(-1.5..1.5)).collect()
}

/// `f(x) = w·x + b` as an MLP without hidden layers.
fn linear_model(w: &[f64], b: f64) -> Model {
    let spec = ModelSpec {
        config: ModelConfig::Mlp(MlpConfig { layers: vec![], dropout: 0.0, d_embedding: 2 }),
        layout: FeatureLayout::numerical(w.len()),
        d_out: 1,
    };
    let mut m = Model::new(spec, 0).unwrap();
    m.params_mut().by_name_mut("head.weight").unwrap().tensor.data_mut().copy_from_slice(w);
    m.params_mut().by_name_mut("head.bias").unwrap().tensor.data_mut()[0] = b;
    m
}

fn small_ft(k: usize, n_layers: usize, n_heads: usize, seed: u64) -> Model {
    let c = FtTransformerConfig {
        n_layers,
        d_token: 8,
        n_heads,
        ffn_factor: 4.0 / 3.0,
        attention_dropout: 0.0,
        ffn_dropout: 0.0,
        residual_dropout: 0.0,
        token_bias: true,
    };
    Model::new(ModelSpec { config: ModelConfig::FtTransformer(c), layout: FeatureLayout::numerical(k), d_out: 1 }, seed).unwrap()
}

#[test]
fn ig_on_linear_model_is_exact() {
    let w = [0.5, -2.0, 0.0, 1.25];
    let m = linear_model(&w, 0.3);
    let x = [1.0, 0.5, -3.0, 2.0];
    for steps in [1, 7, 64] {
        let (ig, cost) = integrated_gradients(&m, &x, &[], &[0.0; 4], steps, 0).unwrap();
        assert_eq!(cost.forward_rows, steps + 1);
        for j in 0..4 {
            assert!((ig.scores[j] - w[j] * x[j]).abs() < 1e-12);
        }
    }
    let base = [0.2, 0.1, 0.0, -1.0];
    let (ig, _) = integrated_gradients(&m, &x, &[], &base, 5, 0).unwrap();
    for j in 0..4 {
        assert!((ig.scores[j] - w[j] * (x[j] - base[j])).abs() < 1e-12);
    }
}

#[test]
fn ig_zero_path_and_errors() {
    let m = small_ft(3, 1, 2, 1);
    let x = [0.4, -0.2, 1.0];
    let (ig, _) = integrated_gradients(&m, &x, &[], &x, 16, 0).unwrap();
    assert!(ig.scores.iter().all(|&v| v == 0.0));
    assert!(matches!(integrated_gradients(&m, &x, &[], &[0.0; 2], 16, 0), Err(Error::Shape(_))));
    assert!(integrated_gradients(&m, &x, &[], &[0.0; 3], 0, 0).is_err());
}

#[test]
fn ig_completeness_on_toy_ft_transformers() {
    for seed in 0..6 {
        let mut m = small_ft(5, 2, 2, seed);
        m.params_mut().by_name_mut("tokenizer.num_weight").unwrap().tensor.data_mut().iter_mut().for_each(|w| *w *= 4.0);
        let x = rand_vec(5, 10 + seed);
        let base = vec![0.0; 5];
        let (ig, _) = integrated_gradients(&m, &x, &[], &base, 256, 0).unwrap();
        let fx = m.forward_eval(&x, &[], 1, Exec::Sequential).unwrap()[0];
        let fb = m.forward_eval(&base, &[], 1, Exec::Sequential).unwrap()[0];
        let total: f64 = ig.scores.iter().sum();
        // random toys can nearly cancel along the path; floor the scale
        let scale = (fx - fb).abs().max(1e-2);
        assert!((total - (fx - fb)).abs() <= 0.01 * scale, "seed {seed}: {total} vs {}", fx - fb);
    }
}

#[test]
fn am_uniform_attention_gives_uniform_importance() {
    let k = 4;
    let mut m = small_ft(k, 1, 1, 2);
    for name in ["layers.0.attention.q.weight", "layers.0.attention.q.bias", "layers.0.attention.k.weight", "layers.0.attention.k.bias"] {
        m.params_mut().by_name_mut(name).unwrap().tensor.data_mut().fill(0.0);
    }
    let x = rand_vec(3 * k, 4);
    let (am, cost) = attention_importance(&m, &x, &[], 3, 2, Exec::Sequential).unwrap();
    assert_eq!(cost.forward_rows, 3);
    for s in &am.scores {
        assert!((s - 1.0 / k as f64).abs() < 1e-12);
    }
}

#[test]
fn am_single_feature_and_probability_vector() {
    let m = small_ft(1, 2, 2, 5);
    let (am, _) = attention_importance(&m, &rand_vec(4, 1), &[], 4, 3, Exec::Sequential).unwrap();
    assert!((am.scores[0] - 1.0).abs() < 1e-12);

    let m = small_ft(6, 2, 4, 6);
    let (am, _) = attention_importance(&m, &rand_vec(6 * 7, 2), &[], 7, 3, Exec::Parallel).unwrap();
    assert!(am.scores.iter().all(|&s| s >= 0.0));
    assert!((am.scores.iter().sum::<f64>() - 1.0).abs() < 1e-10);
}

#[test]
fn am_averaging_order_is_irrelevant() {
    let (k, n) = (5, 6);
    let m = small_ft(k, 2, 2, 7);
    let x = rand_vec(k * n, 3);
    let maps = attention_maps(&m, &x, &[], n, 4, Exec::Sequential).unwrap();
    let mut per_sample_mean = vec![0.0; k + 1];
    for p in &maps {
        per_sample_mean.iter_mut().zip(p).for_each(|(a, v)| *a += v / n as f64);
    }
    // pool every (layer, head, sample) row directly
    let (_, records) = m.forward_eval_with_attention(&x, &[], n, Exec::Sequential).unwrap();
    let mut pooled = vec![0.0; k + 1];
    let mut rows = 0;
    for r in &records {
        for b in 0..n {
            for h in 0..r.n_heads {
                pooled.iter_mut().zip(r.row(b, h)).for_each(|(a, v)| *a += v);
                rows += 1;
            }
        }
    }
    for (a, p) in per_sample_mean.iter().zip(&pooled) {
        assert!((a - p / rows as f64).abs() < 1e-12);
    }
}

#[test]
fn am_rejects_non_transformers() {
    let m = linear_model(&[1.0, 2.0], 0.0);
    assert!(matches!(attention_importance(&m, &[0.0; 2], &[], 1, 1, Exec::Sequential), Err(Error::Unsupported(_))));
}

fn linear_split(w: &[f64], n: usize, seed: u64) -> Split {
    let k = w.len();
    let x = rand_vec(n * k, seed);
    let y = x.chunks(k).map(|r| r.iter().zip(w).map(|(a, b)| a * b).sum()).collect();
    Split { n, x_num: x, x_cat: vec![], y }
}

#[test]
fn permutation_importance_counts_and_zero_weight_feature() {
    let w = [2.0, 0.0, -0.5];
    let m = linear_model(&w, 0.0);
    let split = linear_split(&w, 200, 1);
    let (pt, cost) = permutation_importance(&m, &split, TaskKind::Regression, 3, 4, 64, Exec::Sequential).unwrap();
    assert_eq!(cost.evaluations, 3 * 4 + 1);
    assert_eq!(pt.method, Method::Pt);
    assert_eq!(pt.scores[1], 0.0);
    assert!(pt.scores[0] > pt.scores[2] && pt.scores[2] > 0.0);
    let (par, _) = permutation_importance(&m, &split, TaskKind::Regression, 3, 4, 64, Exec::Parallel).unwrap();
    assert_eq!(pt, par);
    let empty = Split::default();
    assert!(permutation_importance(&m, &empty, TaskKind::Regression, 3, 4, 64, Exec::Sequential).is_err());
}

#[test]
fn permutation_importance_under_row_duplication() {
    let w = [1.0, 0.3];
    let m = linear_model(&w, 0.0);
    let split = linear_split(&w, 300, 2);
    let rows: Vec<usize> = (0..300).chain(0..300).collect();
    let doubled = split.select(&rows, 2, 0);
    let (a, _) = permutation_importance(&m, &split, TaskKind::Regression, 5, 40, 128, Exec::Sequential).unwrap();
    let (b, _) = permutation_importance(&m, &doubled, TaskKind::Regression, 5, 40, 128, Exec::Sequential).unwrap();
    for j in 0..2 {
        assert!((a.scores[j] - b.scores[j]).abs() <= 0.1 * a.scores[j], "{j}: {} vs {}", a.scores[j], b.scores[j]);
    }
}

#[test]
fn spearman_is_invariant_to_monotone_transforms() {
    for seed in 0..20 {
        let a = rand_vec(30, seed);
        let b = rand_vec(30, seed + 100);
        let rho = spearman(&a, &b).unwrap();
        assert!((-1.0..=1.0).contains(&rho));
        let ta: Vec<f64> = a.iter().map(|v| v.exp()).collect();
        let tb: Vec<f64> = b.iter().map(|v| v * 3.0 - 7.0).collect();
        assert!((spearman(&ta, &tb).unwrap() - rho).abs() < 1e-12);
        // tie-free closed form
        let ra = tabdl::explain::average_ranks(&a);
        let rb = tabdl::explain::average_ranks(&b);
        let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
        let n = 30.0;
        assert!((rho - (1.0 - 6.0 * d2 / (n * (n * n - 1.0)))).abs() < 1e-12);
    }
}
