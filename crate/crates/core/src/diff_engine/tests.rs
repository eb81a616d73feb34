use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn check<F>(f: F, params: &[Tensor]) -> f64
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var, DiffError>,
{
    grad_check(f, params, &GradCheckOptions::default()).unwrap().max_rel_error
}

/// Weighted sum so that upstream gradients are not all ones.
fn weighted_sum(g: &mut Graph<'_>, x: Var, seed: u64) -> Result<Var, DiffError> {
    let w = random(g.shape(x), seed);
    let w = g.constant_owned(w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

#[test]
fn matmul_by_identity_is_noop() {
    let a = random(&[3, 4], 1);
    let eye = Tensor::identity(4);
    let mut g = Graph::new();
    let (va, vi) = (g.constant(&a), g.constant(&eye));
    let c = g.matmul(va, vi).unwrap();
    assert_eq!(g.value(c), a.data());
}

#[test]
fn matmul_hand_case() {
    let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
    let mut g = Graph::new();
    let (va, vb) = (g.constant(&a), g.constant(&b));
    let c = g.matmul(va, vb).unwrap();
    assert_eq!(g.value(c), &[19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let mut g = Graph::new();
    let a = g.constant_owned(Tensor::zeros(&[2, 3]));
    let b = g.constant_owned(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(DiffError::Shape(_))));
}

#[test]
fn matmul_gradient_matches_independent_central_differences() {
    let a = random(&[3, 5], 2);
    let b = random(&[5, 4], 3);
    let mut g = Graph::new();
    let (va, vb) = (g.param(&a), g.constant(&b));
    let c = g.matmul(va, vb).unwrap();
    let s = g.sum(c);
    g.backward(s).unwrap();
    let ad = g.grad(va).unwrap().to_vec();

    // sum(A·B) evaluated with plain loops.
    let f = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..4 {
                for t in 0..5 {
                    s += a[i * 5 + t] * b.data()[t * 4 + j];
                }
            }
        }
        s
    };
    let h = 1e-5;
    for i in 0..a.numel() {
        let mut p = a.data().to_vec();
        p[i] += h;
        let fp = f(&p);
        p[i] -= 2.0 * h;
        let fm = f(&p);
        let fd = (fp - fm) / (2.0 * h);
        assert!(relative_error(ad[i], fd) < 1e-6, "coord {i}: {} vs {fd}", ad[i]);
    }
}

#[test]
fn matmul_and_transpose_gradients() {
    let err = check(
        |g, v| {
            let bt = g.transpose(v[1])?;
            let c = g.matmul(v[0], bt)?;
            weighted_sum(g, c, 9)
        },
        &[random(&[3, 5], 4), random(&[4, 5], 5)],
    );
    assert!(err < 1e-6, "{err}");
}

#[test]
fn softmax_examples() {
    let x = Tensor::from_rows(&[
        vec![0.0, 0.0, 0.0, 0.0],
        vec![0.0, 2f64.ln(), -1e300, -1e300],
        vec![1000.0, 1000.0, -1e300, -1e300],
    ])
    .unwrap();
    let mut g = Graph::new();
    let v = g.constant(&x);
    let s = g.softmax_rows(v);
    let out = g.value(s);
    assert_eq!(&out[0..4], &[0.25; 4]);
    assert!((out[4] - 1.0 / 3.0).abs() < 1e-15);
    assert!((out[5] - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(&out[8..10], &[0.5, 0.5]);
    assert!(out.iter().all(|v| v.is_finite()));
}

#[test]
fn softmax_gradient() {
    let err = check(
        |g, v| {
            let s = g.softmax_rows(v[0]);
            weighted_sum(g, s, 11)
        },
        &[random(&[3, 6], 10)],
    );
    assert!(err < 1e-5, "{err}");
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in prop::collection::vec(prop::collection::vec(-700.0f64..700.0, 1..12), 1..6)
    ) {
        let width = rows[0].len();
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(width, 0.0); r }).collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let mut g = Graph::new();
        let v = g.constant(&x);
        let s = g.softmax_rows(v);
        for row in g.value(s).chunks(width) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardises_each_token(
        rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 8), 1..5),
        spread in 0.5f64..20.0,
    ) {
        let rows: Vec<Vec<f64>> = rows
            .into_iter()
            .map(|r| r.iter().enumerate().map(|(j, v)| v + spread * j as f64).collect())
            .collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let (gamma, beta) = (Tensor::filled(&[8], 1.0), Tensor::zeros(&[8]));
        let mut g = Graph::new();
        let (v, gv, bv) = (g.constant(&x), g.constant(&gamma), g.constant(&beta));
        let y = g.layer_norm(v, gv, bv, 1e-12).unwrap();
        for row in g.value(y).chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn layer_norm_examples() {
    let x = Tensor::from_rows(&[vec![2.5; 6]]).unwrap();
    let (gamma, beta) = (Tensor::filled(&[6], 1.0), Tensor::zeros(&[6]));
    let mut g = Graph::new();
    let (v, gv, bv) = (g.constant(&x), g.constant(&gamma), g.constant(&beta));
    let y = g.layer_norm(v, gv, bv, LAYER_NORM_EPS).unwrap();
    assert!(g.value(y).iter().all(|&v| v == 0.0));

    let x = Tensor::from_rows(&[vec![1.0, 3.0]]).unwrap();
    let (gamma, beta) = (Tensor::filled(&[2], 1.0), Tensor::zeros(&[2]));
    let mut g = Graph::new();
    let (v, gv, bv) = (g.constant(&x), g.constant(&gamma), g.constant(&beta));
    let y = g.layer_norm(v, gv, bv, 1e-14).unwrap();
    assert!((g.value(y)[0] + 1.0).abs() < 1e-12);
    assert!((g.value(y)[1] - 1.0).abs() < 1e-12);
}

#[test]
fn layer_norm_rejects_single_feature() {
    let mut g = Graph::new();
    let x = g.constant_owned(Tensor::zeros(&[2, 1]));
    let p = g.constant_owned(Tensor::zeros(&[1]));
    assert!(g.layer_norm(x, p, p, 1e-5).is_err());
}

#[test]
fn layer_norm_gradient_wrt_input_and_affine() {
    let err = check(
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)?;
            weighted_sum(g, y, 21)
        },
        &[random(&[4, 6], 20), random(&[6], 22), random(&[6], 23)],
    );
    assert!(err < 1e-5, "{err}");
}

#[test]
fn attention_with_single_key_returns_value_row() {
    let q = random(&[3, 4], 30);
    let k = random(&[1, 4], 31);
    let v = random(&[1, 5], 32);
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(&q), g.constant(&k), g.constant(&v));
    let o = g.attention(qv, kv, vv).unwrap();
    for row in g.value(o).chunks(5) {
        assert_eq!(row, v.data());
    }
}

#[test]
fn attention_with_zero_queries_averages_values() {
    let q = Tensor::zeros(&[2, 3]);
    let k = random(&[4, 3], 33);
    let v = random(&[4, 2], 34);
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(&q), g.constant(&k), g.constant(&v));
    let o = g.attention(qv, kv, vv).unwrap();
    for row in g.value(o).chunks(2) {
        for c in 0..2 {
            let mean = (0..4).map(|r| v.get(r, c)).sum::<f64>() / 4.0;
            assert!((row[c] - mean).abs() < 1e-15);
        }
    }
}

#[test]
fn attention_two_by_two_hand_case() {
    let q = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let eye = Tensor::identity(2);
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(&q), g.constant(&eye), g.constant(&eye));
    let o = g.attention(qv, kv, vv).unwrap();
    // scores [1/√2, 0] → weights e^{1/√2}/(e^{1/√2}+1), 1/(e^{1/√2}+1)
    let e = (1.0 / 2f64.sqrt()).exp();
    let want = [e / (e + 1.0), 1.0 / (e + 1.0)];
    for (a, b) in g.value(o).iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn fused_attention_matches_composed_primitives() {
    let q = random(&[3, 4], 40);
    let k = random(&[5, 4], 41);
    let v = random(&[5, 2], 42);
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.param(&q), g.param(&k), g.param(&v));
    let fused = g.attention(qv, kv, vv).unwrap();
    let kt = g.transpose(kv).unwrap();
    let s = g.matmul(qv, kt).unwrap();
    let s = g.scale(s, 0.5);
    let p = g.softmax_rows(s);
    let composed = g.matmul(p, vv).unwrap();
    for (a, b) in g.value(fused).iter().zip(g.value(composed)) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn attention_gradients_through_all_inputs() {
    let err = check(
        |g, v| {
            let o = g.attention(v[0], v[1], v[2])?;
            weighted_sum(g, o, 51)
        },
        &[random(&[3, 4], 50), random(&[5, 4], 52), random(&[5, 3], 53)],
    );
    assert!(err < 1e-5, "{err}");
}

#[test]
fn blocked_multi_head_attention_gradients() {
    let err = check(
        |g, v| {
            let o = g.attention_blocked(v[0], v[1], v[2], 2, 2)?;
            weighted_sum(g, o, 61)
        },
        &[random(&[6, 4], 60), random(&[4, 4], 62), random(&[4, 6], 63)],
    );
    assert!(err < 1e-5, "{err}");
}

#[test]
fn blocks_do_not_attend_across_each_other() {
    // Two blocks; changing the second block's keys must not move the first
    // block's outputs.
    let q = random(&[4, 3], 70);
    let k1 = random(&[4, 3], 71);
    let mut k2 = k1.clone();
    k2.data_mut()[6..].iter_mut().for_each(|x| *x += 3.0);
    let v = random(&[4, 3], 72);
    let run = |k: &Tensor| {
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(&q), g.constant(k), g.constant(&v));
        let o = g.attention_blocked(qv, kv, vv, 2, 1).unwrap();
        g.value(o).to_vec()
    };
    let (a, b) = (run(&k1), run(&k2));
    assert_eq!(&a[..6], &b[..6]);
    assert_ne!(&a[6..], &b[6..]);
}

#[test]
fn ffn_identity_and_clamp() {
    let eye = Tensor::identity(3);
    let zero = Tensor::zeros(&[3]);
    let pos = Tensor::from_rows(&[vec![0.5, 1.0, 2.0]]).unwrap();
    let neg = Tensor::from_rows(&[vec![-0.5, -1.0, -2.0]]).unwrap();
    for (x, want) in [(&pos, pos.data().to_vec()), (&neg, vec![0.0; 3])] {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (w, b) = (g.constant(&eye), g.constant(&zero));
        let y = g.ffn(xv, w, b, w, b).unwrap();
        assert_eq!(g.value(y), want.as_slice());
    }
}

#[test]
fn ffn_gradient_on_random_instance() {
    let err = check(
        |g, v| {
            let y = g.ffn(v[0], v[1], v[2], v[3], v[4])?;
            weighted_sum(g, y, 81)
        },
        &[random(&[4, 8], 80), random(&[8, 16], 82), random(&[16], 83), random(&[16, 8], 84), random(&[8], 85)],
    );
    assert!(err < 1e-6, "{err}");
}

#[test]
fn dropout_identity_cases() {
    let x = random(&[10, 10], 90);
    let mut g = Graph::new();
    let v = g.constant(&x);
    assert_eq!(g.dropout(v, 0.0, Mode::Train, 1).unwrap(), v);
    assert_eq!(g.dropout(v, 0.7, Mode::Eval, 1).unwrap(), v);
    assert!(g.dropout(v, 1.0, Mode::Train, 1).is_err());
}

#[test]
fn dropout_preserves_mean_in_expectation() {
    let ones = Tensor::filled(&[1000, 1000], 1.0);
    let mut g = Graph::new();
    let v = g.constant(&ones);
    let d = g.dropout(v, 0.5, Mode::Train, 7).unwrap();
    let out = g.value(d);
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    assert!((mean - 1.0).abs() < 0.01, "{mean}");
    assert!(out.iter().all(|&x| x == 0.0 || x == 2.0));
}

#[test]
fn dropout_gradient_follows_mask() {
    let err = check(
        |g, v| {
            let d = g.dropout(v[0], 0.3, Mode::Train, 5)?;
            weighted_sum(g, d, 91)
        },
        &[random(&[5, 6], 92)],
    );
    assert!(err < 1e-8, "{err}");
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let z = g.constant_owned(Tensor::filled(&[3, 4], 0.7));
    let l = g.cross_entropy(z, &[0, 2, 3], None).unwrap();
    assert!((g.value(l)[0] - 4f64.ln()).abs() < 1e-12);

    let mut g = Graph::new();
    let z = g.constant_owned(Tensor::from_rows(&[vec![0.0, 30.0, 0.0, 0.0]]).unwrap());
    let l = g.cross_entropy(z, &[1], None).unwrap();
    assert!(g.value(l)[0] < 1e-9);

    let mut g = Graph::new();
    let z = g.constant_owned(Tensor::zeros(&[1, 4]));
    assert!(matches!(
        g.cross_entropy(z, &[4], None),
        Err(DiffError::LabelOutOfRange { label: 4, classes: 4 })
    ));
    let z = g.constant_owned(Tensor::from_rows(&[vec![0.0, f64::NAN, 0.0, 0.0]]).unwrap());
    assert!(matches!(g.cross_entropy(z, &[0], None), Err(DiffError::NonFinite(_))));
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let logits = random(&[1, 4], 100);
    let mut g = Graph::new();
    let z = g.param(&logits);
    let l = g.cross_entropy(z, &[2], None).unwrap();
    g.backward(l).unwrap();
    let grad = g.grad(z).unwrap().to_vec();
    let max = logits.data().iter().copied().fold(f64::MIN, f64::max);
    let exps: Vec<f64> = logits.data().iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    for j in 0..4 {
        let want = exps[j] / total - if j == 2 { 1.0 } else { 0.0 };
        assert!((grad[j] - want).abs() < 1e-14);
    }
    let err = check(|g, v| g.cross_entropy(v[0], &[2, 0, 1], None), &[random(&[3, 4], 101)]);
    assert!(err < 1e-6, "{err}");
    let w = [1.0, 3.0, 0.5, 2.0];
    let err = check(|g, v| g.cross_entropy(v[0], &[2, 0, 1], Some(&w)), &[random(&[3, 4], 102)]);
    assert!(err < 1e-6, "{err}");
}

#[test]
fn pooling_concat_and_elementwise_gradients() {
    let err = check(
        |g, v| {
            let pa = g.mean_pool(v[0], 3)?;
            let pb = g.mean_pool(v[1], 3)?;
            let m = g.mul(pa, pb)?;
            let s = g.add(pa, pb)?;
            let s = g.scale(s, 0.5);
            let c = g.concat_cols(m, s)?;
            let c = g.add_bias(c, v[2])?;
            let r = g.relu(c);
            weighted_sum(g, r, 111)
        },
        &[random(&[6, 4], 110), random(&[6, 4], 112), random(&[8], 113)],
    );
    assert!(err < 1e-6, "{err}");
}

#[test]
fn backward_is_deterministic_and_accumulates_shared_inputs() {
    let x = random(&[3, 3], 120);
    let run = || {
        let mut g = Graph::new();
        let v = g.param(&x);
        let a = g.matmul(v, v).unwrap();
        let b = g.mul(a, v).unwrap();
        let s = g.sum(b);
        g.backward(s).unwrap();
        g.grad(v).unwrap().to_vec()
    };
    assert_eq!(run(), run());

    // d/dx sum(x + x) = 2 everywhere.
    let mut g = Graph::new();
    let v = g.param(&x);
    let y = g.add(v, v).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(v).unwrap().iter().all(|&d| d == 2.0));
}

#[test]
fn constants_receive_no_gradient() {
    let x = random(&[2, 2], 130);
    let w = random(&[2, 2], 131);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(&x), g.param(&w));
    let y = g.matmul(xv, wv).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(xv).is_none());
    assert!(g.grad(wv).is_some());
}
