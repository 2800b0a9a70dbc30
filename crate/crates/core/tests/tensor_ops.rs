use rand::Rng as _;
use tabdl::gradcheck::{check, check_projected};
use tabdl::rng;
use tabdl::tensor::{BATCH_NORM_EPS, LAYER_NORM_EPS};
use tabdl::{Error, Tape, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Random values kept away from the relu kink so central differences of
/// width `H` never straddle it.
fn rand_away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut t = rand_tensor(shape, seed);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1_f64.copysign(*v);
        }
    }
    t
}

fn assert_passes(name: &str, seed: u64, err: f64) {
    assert!(err < TOL, "{name} seed {seed}: max rel err {err:e}");
}

#[test]
fn reglu_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![4], vec![0.0; 4]).unwrap();
    let y = tape.reglu(x).unwrap();
    assert_eq!(tape.value(y), &[0.0, 0.0]);

    let x = tape.constant(vec![4], vec![1.0, 2.0, -1.0, 3.0]).unwrap();
    let y = tape.reglu(x).unwrap();
    assert_eq!(tape.value(y), &[0.0, 6.0]);

    let odd = tape.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    assert!(matches!(tape.reglu(odd), Err(Error::Shape(_))));

    let r = check_projected(&[Tensor::vector(vec![1.0, 2.0, -1.0, 3.0])], H, 0, |t, v| t.reglu(v[0])).unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let g = tape.constant(vec![3], vec![1.0; 3]).unwrap();
    let b = tape.constant(vec![3], vec![0.0; 3]).unwrap();
    let x = tape.constant(vec![1, 3], vec![5.0; 3]).unwrap();
    let y = tape.layer_norm(x, g, b, LAYER_NORM_EPS).unwrap();
    assert_eq!(tape.value(y), &[0.0, 0.0, 0.0]);

    let g = tape.constant(vec![2], vec![1.0; 2]).unwrap();
    let b = tape.constant(vec![2], vec![0.0; 2]).unwrap();
    let x = tape.constant(vec![1, 2], vec![1.0, -1.0]).unwrap();
    let y = tape.layer_norm(x, g, b, 0.0).unwrap();
    assert_eq!(tape.value(y), &[1.0, -1.0]);

    let g0 = tape.constant(vec![0], vec![]).unwrap();
    let x0 = tape.constant(vec![2, 0], vec![]).unwrap();
    assert!(matches!(tape.layer_norm(x0, g0, g0, 1e-5), Err(Error::Shape(_))));

    // unit gamma, zero beta: rows have |mean| < 1e-10
    let mut tape = Tape::new();
    let x = tape.leaf(rand_tensor(&[5, 7], 3));
    let g = tape.constant(vec![7], vec![1.0; 7]).unwrap();
    let b = tape.constant(vec![7], vec![0.0; 7]).unwrap();
    let y = tape.layer_norm(x, g, b, LAYER_NORM_EPS).unwrap();
    for row in tape.value(y).chunks(7) {
        assert!((row.iter().sum::<f64>() / 7.0).abs() < 1e-10);
    }

    let inputs = [rand_tensor(&[3, 4], 11), rand_tensor(&[4], 12), rand_tensor(&[4], 13)];
    let r = check_projected(&inputs, H, 1, |t, v| t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)).unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn softmax_examples_and_invariants() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.value(y), &[0.5, 0.5]);
    let x = tape.constant(vec![2], vec![1000.0, 1000.0]).unwrap();
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.value(y), &[0.5, 0.5]);
    let x = tape.constant(vec![2], vec![1f64.ln(), 3f64.ln()]).unwrap();
    let y = tape.softmax(x).unwrap();
    assert!((tape.value(y)[0] - 0.25).abs() < 1e-15);
    assert!((tape.value(y)[1] - 0.75).abs() < 1e-15);

    for seed in 0..10 {
        let t = rand_tensor(&[4, 6], seed);
        let shifted: Vec<f64> = t
            .data()
            .chunks(6)
            .enumerate()
            .flat_map(|(r, row)| row.iter().map(move |v| v + 10.0 * r as f64 - 7.0))
            .collect();
        let mut tape = Tape::new();
        let a = tape.leaf(t.clone());
        let b = tape.constant(vec![4, 6], shifted).unwrap();
        let ya = tape.softmax(a).unwrap();
        let yb = tape.softmax(b).unwrap();
        for (ra, rb) in tape.value(ya).chunks(6).zip(tape.value(yb).chunks(6)) {
            assert!((ra.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(ra.iter().all(|&p| p >= 0.0));
            for (p, q) in ra.iter().zip(rb) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn dropout_contract() {
    let mut r = rng::seeded(0);
    let mut tape = Tape::new();
    let x = tape.leaf(rand_tensor(&[3, 3], 1));
    assert_eq!(tape.dropout(x, 0.0, true, &mut r).unwrap(), x);
    let y = tape.dropout(x, 0.7, false, &mut r).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
    assert!(matches!(tape.dropout(x, 1.0, true, &mut r), Err(Error::Parameter(_))));

    let ones = tape.constant(vec![100_000], vec![1.0; 100_000]).unwrap();
    let y = tape.dropout(ones, 0.5, true, &mut r).unwrap();
    let mean = tape.value(y).iter().sum::<f64>() / 100_000.0;
    assert!((0.99..=1.01).contains(&mean), "mean {mean}");

    // same seed, same mask
    let run = |seed| {
        let mut r = rng::seeded(seed);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![64], 2.0));
        let y = tape.dropout(x, 0.3, true, &mut r).unwrap();
        tape.value(y).to_vec()
    };
    assert_eq!(run(5), run(5));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(rand_tensor(&[2, 3], 0).with_grad());
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0; 6]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);

    let mut t = Tensor::vector(vec![1.0, 2.0]).with_grad();
    g.accumulate_into(x, &mut t);
    g.accumulate_into(x, &mut t);
    assert_eq!(t.grad().unwrap(), &[4.0, 8.0]);

    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn mlp_block_composite_gradient() {
    // Dropout(ReLU(Linear(x))) with a fixed mask, summed through a head.
    let inputs = [rand_tensor(&[4, 5], 21), rand_tensor(&[5, 3], 22), rand_tensor(&[3], 23)];
    let r = check_projected(&inputs, H, 2, |t, v| {
        let mut rng = rng::seeded(99);
        let h = t.linear(v[0], v[1], Some(v[2]))?;
        let h = t.relu(h);
        t.dropout(h, 0.25, true, &mut rng)
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-5, "{r:?}");
}

/// Every differentiable primitive, 10 seeded inputs each.
#[test]
fn primitive_gradients_match_finite_differences() {
    for seed in 0..10u64 {
        let s = seed * 100;
        let r = check_projected(&[rand_tensor(&[3, 4], s), rand_tensor(&[4, 2], s + 1)], H, s, |t, v| t.matmul(v[0], v[1])).unwrap();
        assert_passes("matmul", seed, r.max_rel_err);

        let r = check_projected(&[rand_tensor(&[2, 3, 4], s), rand_tensor(&[2, 4, 5], s + 1)], H, s, |t, v| t.bmm(v[0], v[1], false)).unwrap();
        assert_passes("bmm", seed, r.max_rel_err);
        let r = check_projected(&[rand_tensor(&[2, 3, 4], s), rand_tensor(&[2, 5, 4], s + 1)], H, s, |t, v| t.bmm(v[0], v[1], true)).unwrap();
        assert_passes("bmm_t", seed, r.max_rel_err);

        let r = check_projected(&[rand_tensor(&[3, 4], s), rand_tensor(&[3, 4], s + 1)], H, s, |t, v| t.add(v[0], v[1])).unwrap();
        assert_passes("add", seed, r.max_rel_err);
        let r = check_projected(&[rand_tensor(&[3, 4], s), rand_tensor(&[3, 4], s + 1)], H, s, |t, v| t.mul(v[0], v[1])).unwrap();
        assert_passes("mul", seed, r.max_rel_err);
        let r = check_projected(&[rand_tensor(&[2, 3, 4], s), rand_tensor(&[3, 4], s + 1)], H, s, |t, v| t.add_trailing(v[0], v[1])).unwrap();
        assert_passes("add_trailing", seed, r.max_rel_err);
        let r = check_projected(&[rand_tensor(&[3, 4], s)], H, s, |t, v| Ok(t.scale(v[0], -2.5))).unwrap();
        assert_passes("scale", seed, r.max_rel_err);

        let r = check_projected(&[rand_away_from_zero(&[3, 4], s)], H, s, |t, v| Ok(t.relu(v[0]))).unwrap();
        assert_passes("relu", seed, r.max_rel_err);
        let r = check_projected(&[rand_away_from_zero(&[3, 6], s)], H, s, |t, v| t.reglu(v[0])).unwrap();
        assert_passes("reglu", seed, r.max_rel_err);
        let r = check_projected(&[rand_tensor(&[3, 5], s)], H, s, |t, v| t.softmax(v[0])).unwrap();
        assert_passes("softmax", seed, r.max_rel_err);

        let r = check_projected(&[rand_tensor(&[3, 5], s), rand_tensor(&[5], s + 1), rand_tensor(&[5], s + 2)], H, s, |t, v| t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)).unwrap();
        assert_passes("layer_norm", seed, r.max_rel_err);

        let (rm, rv) = (vec![0.1, -0.2, 0.3], vec![0.5, 1.5, 2.0]);
        for training in [true, false] {
            let r = check_projected(&[rand_tensor(&[6, 3], s), rand_tensor(&[3], s + 1), rand_tensor(&[3], s + 2)], H, s, |t, v| {
                Ok(t.batch_norm(v[0], v[1], v[2], &rm, &rv, training, BATCH_NORM_EPS)?.0)
            })
            .unwrap();
            assert_passes("batch_norm", seed, r.max_rel_err);
        }

        let r = check_projected(&[rand_tensor(&[3, 4], s)], H, s, |t, v| {
            let mut r = rng::seeded(seed);
            t.dropout(v[0], 0.4, true, &mut r)
        })
        .unwrap();
        assert_passes("dropout", seed, r.max_rel_err);

        let r = check_projected(&[rand_tensor(&[5, 3], s)], H, s, |t, v| t.embedding(v[0], &[4, 0, 4, 2])).unwrap();
        assert_passes("embedding", seed, r.max_rel_err);
        let r = check_projected(&[rand_tensor(&[2, 3], s), rand_tensor(&[3, 4], s + 1)], H, s, |t, v| t.token_scale(v[0], v[1])).unwrap();
        assert_passes("token_scale", seed, r.max_rel_err);
        let r = check_projected(&[rand_tensor(&[2, 3, 2], s), rand_tensor(&[2, 1, 2], s + 1)], H, s, |t, v| t.concat(&[v[0], v[1]], 1)).unwrap();
        assert_passes("concat", seed, r.max_rel_err);
        let r = check_projected(&[rand_tensor(&[2, 3, 4], s), rand_tensor(&[4], s + 1)], H, s, |t, v| t.prepend_row(v[0], v[1])).unwrap();
        assert_passes("prepend_row", seed, r.max_rel_err);
        let r = check_projected(&[rand_tensor(&[2, 3, 4, 2], s)], H, s, |t, v| t.swap_axes12(v[0])).unwrap();
        assert_passes("swap_axes12", seed, r.max_rel_err);
        let r = check_projected(&[rand_tensor(&[2, 4, 3], s)], H, s, |t, v| t.narrow(v[0], 1, 2)).unwrap();
        assert_passes("narrow", seed, r.max_rel_err);
        let r = check_projected(&[rand_tensor(&[2, 6], s)], H, s, |t, v| t.reshape(v[0], vec![3, 4])).unwrap();
        assert_passes("reshape", seed, r.max_rel_err);
        let r = check(&[rand_tensor(&[2, 6], s)], H, |t, v| Ok(t.mean(v[0]))).unwrap();
        assert_passes("mean", seed, r.max_rel_err);

        let target: Vec<f64> = rand_tensor(&[6], s + 9).into_data();
        let r = check(&[rand_tensor(&[6], s)], H, |t, v| t.mse(v[0], &target)).unwrap();
        assert_passes("mse", seed, r.max_rel_err);
        let r = check(&[rand_tensor(&[4, 3], s)], H, |t, v| t.cross_entropy(v[0], &[0, 2, 1, 2])).unwrap();
        assert_passes("cross_entropy", seed, r.max_rel_err);
        let r = check(&[rand_tensor(&[4], s)], H, |t, v| t.bce_with_logits(v[0], &[0.0, 1.0, 1.0, 0.0])).unwrap();
        assert_passes("bce_with_logits", seed, r.max_rel_err);
    }
}

#[test]
fn loss_values() {
    let mut tape = Tape::new();
    let p = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
    let l = tape.mse(p, &[1.0, 1.0]).unwrap();
    assert_eq!(tape.value(l), &[1.0]);
    let z = tape.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
    let l = tape.cross_entropy(z, &[1]).unwrap();
    assert!((tape.value(l)[0] - 2f64.ln()).abs() < 1e-15);
    let z = tape.constant(vec![1], vec![0.0]).unwrap();
    let l = tape.bce_with_logits(z, &[1.0]).unwrap();
    assert!((tape.value(l)[0] - 2f64.ln()).abs() < 1e-15);
    let z = tape.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
    assert!(matches!(tape.cross_entropy(z, &[2]), Err(Error::Data(_))));
}

#[test]
fn embedding_rejects_out_of_range() {
    let mut tape = Tape::new();
    let t = tape.leaf(Tensor::zeros(vec![3, 2]));
    assert!(matches!(tape.embedding(t, &[3]), Err(Error::Data(_))));
}

#[test]
fn gradients_accumulate_across_uses() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![3.0]).with_grad());
    let a = tape.scale(x, 2.0);
    let b = tape.add(a, x).unwrap();
    let y = tape.sum(b);
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap(), &[3.0]);
}

#[test]
fn same_seed_bit_identical() {
    let a = rand_tensor(&[4, 4], 77);
    let b = rand_tensor(&[4, 4], 77);
    assert_eq!(a.data(), b.data());
}

/// Direct per-head loops over `softmax(q kᵀ / sqrt(dh)) v`.
fn naive_attention(q: &[f64], k: &[f64], v: &[f64], b: usize, tq: usize, t: usize, d: usize, h: usize) -> Vec<f64> {
    let dh = d / h;
    let mut out = vec![0.0; b * tq * d];
    for bi in 0..b {
        for hi in 0..h {
            for i in 0..tq {
                let s: Vec<f64> = (0..t)
                    .map(|j| (0..dh).map(|c| q[(bi * tq + i) * d + hi * dh + c] * k[(bi * t + j) * d + hi * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                for j in 0..t {
                    let p = (s[j] - m).exp() / z;
                    for c in 0..dh {
                        out[(bi * tq + i) * d + hi * dh + c] += p * v[(bi * t + j) * d + hi * dh + c];
                    }
                }
            }
        }
    }
    out
}

#[test]
fn fused_attention_matches_loops() {
    for (tq, h) in [(5, 1), (5, 2), (1, 4)] {
        let (b, t, d) = (2, 5, 8);
        let (q, k, v) = (rand_tensor(&[b, tq, d], 1), rand_tensor(&[b, t, d], 2), rand_tensor(&[b, t, d], 3));
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()));
        let o = tape.attention(qv, kv, vv, h, None).unwrap();
        let want = naive_attention(q.data(), k.data(), v.data(), b, tq, t, d, h);
        for (a, w) in tape.value(o).iter().zip(&want) {
            assert!((a - w).abs() < 1e-12, "{a} vs {w}");
        }
        let p = tape.attention_probs(o).unwrap();
        for row in p.chunks(t) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn fused_attention_gradients_match_finite_differences() {
    for seed in 0..5u64 {
        let s = seed * 100;
        let inputs = [rand_tensor(&[2, 3, 8], s), rand_tensor(&[2, 4, 8], s + 1), rand_tensor(&[2, 4, 8], s + 2)];
        let r = check_projected(&inputs, H, s, |t, v| t.attention(v[0], v[1], v[2], 2, None)).unwrap();
        assert_passes("attention", seed, r.max_rel_err);
        // the same mask on every evaluation
        let r = check_projected(&inputs, H, s, |t, v| {
            let mut r = rng::seeded(seed);
            t.attention(v[0], v[1], v[2], 4, Some((0.3, &mut r)))
        })
        .unwrap();
        assert_passes("attention_dropout", seed, r.max_rel_err);
    }
}

#[test]
fn fused_attention_rejects_bad_heads() {
    let mut tape = Tape::new();
    let x = tape.leaf(rand_tensor(&[1, 2, 6], 0));
    assert!(matches!(tape.attention(x, x, x, 4, None), Err(Error::Shape(_))));
}
