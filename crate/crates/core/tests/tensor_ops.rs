//! Tensor kernels against direct reference implementations, and every
//! differentiable op against central finite differences.

use marformer::tensor::ops::{self, LAYERNORM_EPS};
use marformer::tensor::io::{read_tensor, write_tensor};
use marformer::tensor::{finite_diff_grad, relative_error, DType, Graph, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;
use common::{assert_close, conv_reference, random};

#[test]
fn conv2d_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // (cin, cout, h, w, k, stride, pad, groups, bias)
    let cases = [
        (3, 4, 7, 5, 3, 1, 1, 1, true),
        (4, 4, 8, 8, 3, 2, 1, 4, false),
        (6, 4, 9, 6, 1, 1, 0, 2, true),
        (2, 6, 5, 5, 5, 1, 2, 2, false),
        (8, 8, 10, 10, 7, 1, 3, 8, false),
        (3, 2, 6, 9, 3, 3, 0, 1, true),
    ];
    for (cin, cout, h, w, k, s, p, g, with_bias) in cases {
        let x = random(&[cin, h, w], &mut rng);
        let wt = random(&[cout, cin / g, k, k], &mut rng);
        let b = random(&[cout], &mut rng);
        let bias = with_bias.then_some(&b);
        let got = ops::conv2d(&x, &wt, bias, s, p, g).unwrap();
        let want = conv_reference(x.data(), (cin, h, w), wt.data(), (cout, k), bias.map(|b| b.data()), s, p, g);
        assert_close(got.data(), &want, 1e-12);
    }
}

#[test]
fn conv2d_batched_equals_per_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[3, 2, 6, 6], &mut rng);
    let wt = random(&[5, 2, 3, 3], &mut rng);
    let batched = ops::conv2d(&x, &wt, None, 1, 1, 1).unwrap();
    assert_eq!(batched.shape(), &[3, 5, 6, 6]);
    for n in 0..3 {
        let xi = Tensor::from_f64(&[2, 6, 6], x.data()[n * 72..(n + 1) * 72].to_vec()).unwrap();
        let yi = ops::conv2d(&xi, &wt, None, 1, 1, 1).unwrap();
        assert_close(&batched.data()[n * 180..(n + 1) * 180], yi.data(), 0.0);
    }
}

/// `erf` by its Maclaurin series, accurate for |x| ≤ 3 with enough terms.
fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for n in 1..200 {
        term *= -x * x / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

#[test]
fn gelu_matches_erf_series() {
    for i in -30..=30 {
        let x = i as f64 / 10.0;
        let want = 0.5 * x * (1.0 + erf_series(x / std::f64::consts::SQRT_2));
        assert!((ops::gelu_scalar(x) - want).abs() < 1e-12, "x={x}");
    }
}

#[test]
fn softmax_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[3, 5], &mut rng).map(|v| 10.0 * v);
    let y = ops::softmax(&x, 1).unwrap();
    for r in 0..3 {
        let row = &x.data()[r * 5..(r + 1) * 5];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        let want: Vec<f64> = row.iter().map(|v| v.exp() / z).collect();
        assert_close(&y.data()[r * 5..(r + 1) * 5], &want, 1e-15);
    }
    let y0 = ops::softmax(&x, 0).unwrap();
    for c in 0..5 {
        let s: f64 = (0..3).map(|r| y0.data()[r * 5 + c]).sum();
        assert!((s - 1.0).abs() < 1e-15);
    }
}

#[test]
fn layernorm_matches_two_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (c, h, w) = (6, 3, 4);
    let x = random(&[c, h, w], &mut rng);
    let gamma = random(&[c], &mut rng);
    let beta = random(&[c], &mut rng);
    let y = ops::layernorm_channels(&x, &gamma, Some(&beta), LAYERNORM_EPS).unwrap();
    for p in 0..h * w {
        let v: Vec<f64> = (0..c).map(|ch| x.data()[ch * h * w + p]).collect();
        let mean = v.iter().sum::<f64>() / c as f64;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / c as f64;
        for ch in 0..c {
            let want = (v[ch] - mean) / (var + LAYERNORM_EPS).sqrt() * gamma.data()[ch] + beta.data()[ch];
            assert!((y.data()[ch * h * w + p] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_transpose_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[2, 4, 5], &mut rng);
    let ab_t = ops::transpose_last2(&ops::matmul(&a, &b).unwrap()).unwrap();
    let bt_at = ops::matmul(&ops::transpose_last2(&b).unwrap(), &ops::transpose_last2(&a).unwrap()).unwrap();
    assert_eq!(ab_t.shape(), &[2, 5, 3]);
    assert_close(ab_t.data(), bt_at.data(), 1e-14);
    assert!(ops::matmul(&a, &a).is_err());
}

#[test]
fn pixel_unshuffle_index_formula() {
    let (c, h, w, r) = (2, 4, 6, 2);
    let x = Tensor::from_f64(&[c, h, w], (0..c * h * w).map(|i| i as f64).collect()).unwrap();
    let y = ops::pixel_unshuffle(&x, r).unwrap();
    assert_eq!(y.shape(), &[c * r * r, h / r, w / r]);
    for ch in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                for i in 0..h / r {
                    for j in 0..w / r {
                        let out_c = ch * r * r + dy * r + dx;
                        let got = y.data()[(out_c * (h / r) + i) * (w / r) + j];
                        let want = x.data()[(ch * h + i * r + dy) * w + j * r + dx];
                        assert_eq!(got, want);
                    }
                }
            }
        }
    }
}

#[test]
fn mtsr_roundtrip_f32_and_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for dtype in [DType::F32, DType::F64] {
        let t = random(&[2, 3, 5], &mut rng).to_dtype(dtype);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(buf.len(), 4 + 1 + 1 + 1 + 3 * 4 + 30 * dtype.byte_width());
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }
}

// ---- backward against finite differences ----

const H: f64 = 1e-6;

/// Checks d(sum(w ⊙ f(x)))/dx for a graph builder `f`, with `w` random.
fn check_unary(x: &Tensor, build: impl Fn(&mut Graph, Var) -> Var, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = build(&mut g, v);
        random(g.shape(y), &mut rng)
    };
    let loss = |t: &Tensor| -> marformer::Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let y = build(&mut g, v);
        Ok(g.value(y).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
    };
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let y = build(&mut g, v);
    let p = g.constant(probe.clone());
    let prod = g.mul(y, p).unwrap();
    let l = g.sum(prod);
    let grads = g.backward(l).unwrap();
    let analytic = grads.get(v).unwrap();
    let numeric = finite_diff_grad(loss, x, H).unwrap();
    for (a, n) in analytic.data().iter().zip(numeric.data()) {
        assert!(relative_error(*a, *n) < 1e-6 || (a - n).abs() < 1e-9, "{a} vs {n}");
    }
}

#[test]
fn conv2d_backward_all_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (cin, cout, k, s, p, grp) in [(2, 3, 3, 1, 1, 1), (4, 4, 3, 2, 1, 4), (4, 2, 1, 1, 0, 2)] {
        let x = random(&[cin, 6, 6], &mut rng);
        let wt = random(&[cout, cin / grp, k, k], &mut rng);
        let b = random(&[cout], &mut rng);
        let (w2, b2) = (wt.clone(), b.clone());
        check_unary(&x, move |g, v| {
            let wv = g.constant(w2.clone());
            let bv = g.constant(b2.clone());
            g.conv2d(v, wv, Some(bv), s, p, grp).unwrap()
        }, 11);
        let (x2, b3) = (x.clone(), b.clone());
        check_unary(&wt, move |g, wv| {
            let xv = g.constant(x2.clone());
            let bv = g.constant(b3.clone());
            g.conv2d(xv, wv, Some(bv), s, p, grp).unwrap()
        }, 12);
        let (x3, w3) = (x.clone(), wt.clone());
        check_unary(&b, move |g, bv| {
            let xv = g.constant(x3.clone());
            let wv = g.constant(w3.clone());
            g.conv2d(xv, wv, Some(bv), s, p, grp).unwrap()
        }, 13);
    }
}

#[test]
fn elementwise_and_shape_ops_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x = random(&[4, 4, 6], &mut rng);
    check_unary(&x, |g, v| g.gelu(v), 1);
    check_unary(&x, |g, v| g.exp(v), 2);
    check_unary(&x, |g, v| g.scale(v, -2.5), 3);
    check_unary(&x, |g, v| g.pixel_unshuffle(v, 2).unwrap(), 4);
    check_unary(&x, |g, v| g.pixel_shuffle(v, 2).unwrap(), 5);
    check_unary(&x, |g, v| g.narrow(v, 1, 2).unwrap(), 6);
    check_unary(&x, |g, v| g.reshape(v, &[8, 12]).unwrap(), 7);
    check_unary(&x, |g, v| {
        let a = g.narrow(v, 0, 1).unwrap();
        g.concat(&[v, a]).unwrap()
    }, 8);
    check_unary(&x, |g, v| g.mul(v, v).unwrap(), 9);
    check_unary(&x, |g, v| {
        let t = g.gelu(v);
        g.sub(v, t).unwrap()
    }, 10);
    let m = random(&[3, 5], &mut rng);
    check_unary(&m, |g, v| g.softmax(v, 1).unwrap(), 11);
    check_unary(&m, |g, v| g.softmax(v, 0).unwrap(), 12);
    check_unary(&m, |g, v| g.transpose(v).unwrap(), 13);
    check_unary(&m, |g, v| {
        let t = g.transpose(v).unwrap();
        g.matmul(v, t).unwrap()
    }, 14);
    check_unary(&m, |g, v| g.mean(v), 15);
}

#[test]
fn layernorm_backward_input_and_gamma() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let x = random(&[5, 3, 3], &mut rng);
    let gamma = random(&[5], &mut rng);
    let g2 = gamma.clone();
    check_unary(&x, move |g, v| {
        let gv = g.constant(g2.clone());
        g.layernorm_channels(v, gv, None).unwrap()
    }, 31);
    let x2 = x.clone();
    check_unary(&gamma, move |g, gv| {
        let xv = g.constant(x2.clone());
        g.layernorm_channels(xv, gv, None).unwrap()
    }, 32);
}

#[test]
fn mul_scalar_backward_both_sides() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let x = random(&[3, 4], &mut rng);
    let s = random(&[1], &mut rng);
    let s2 = s.clone();
    check_unary(&x, move |g, v| {
        let sv = g.constant(s2.clone());
        g.mul_scalar(v, sv).unwrap()
    }, 41);
    let x2 = x.clone();
    check_unary(&s, move |g, sv| {
        let xv = g.constant(x2.clone());
        g.mul_scalar(xv, sv).unwrap()
    }, 42);
}

#[test]
fn l1_loss_values_and_gradient() {
    let mut g = Graph::new();
    let p = g.param(Tensor::from_f64(&[2], vec![1.0, 3.0]).unwrap());
    let t = g.constant(Tensor::zeros(&[2], DType::F64));
    let l = g.l1_loss(p, t).unwrap();
    assert_eq!(g.value(l).data()[0], 2.0);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(p).unwrap().data(), &[0.5, 0.5]);

    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let pred = random(&[4, 5], &mut rng);
    let target = random(&[4, 5], &mut rng);
    let tgt = target.clone();
    let numeric = finite_diff_grad(
        |x| Ok(x.data().iter().zip(tgt.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 20.0),
        &pred,
        1e-7,
    )
    .unwrap();
    let mut g = Graph::new();
    let pv = g.param(pred.clone());
    let tv = g.constant(target.clone());
    let l = g.l1_loss(pv, tv).unwrap();
    let grads = g.backward(l).unwrap();
    for ((a, n), (x, y)) in grads.get(pv).unwrap().data().iter().zip(numeric.data()).zip(pred.data().iter().zip(target.data())) {
        assert_eq!(*a, (x - y).signum() / 20.0);
        assert!((a - n).abs() < 1e-8);
    }

    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2], DType::F64));
    let b = g.constant(Tensor::zeros(&[3], DType::F64));
    assert!(g.l1_loss(a, b).is_err());
}

proptest! {
    #[test]
    fn shuffle_roundtrip(c in 1usize..4, h in 1usize..4, w in 1usize..4, r in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[c, h * r, w * r], &mut rng);
        let back = ops::pixel_shuffle(&ops::pixel_unshuffle(&x, r).unwrap(), r).unwrap();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn softmax_shift_invariant(rows in 1usize..4, cols in 1usize..6, shift in -50.0f64..50.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[rows, cols], &mut rng);
        let a = ops::softmax(&x, 1).unwrap();
        let b = ops::softmax(&x.map(|v| v + shift), 1).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn f32_tensors_hold_f32_values(vals in proptest::collection::vec(-1e6f64..1e6, 1..20)) {
        let t = Tensor::new(&[vals.len()], vals.clone(), DType::F32).unwrap();
        for (a, b) in t.data().iter().zip(&vals) {
            prop_assert_eq!(*a, *b as f32 as f64);
        }
    }
}
