use dat_tensor::{
    finite_difference_check, finite_difference_check_with, BnMode, GradCheckOptions, Graph,
    Reduction, RunningStats, Tensor, TensorError, Var,
};
use proptest::prelude::*;

mod support;
use support::{primitives, randn, rng};

/// Quadruple-loop cross-correlation.
fn direct_conv(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    b: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (n, c, h, w) = x.dims4("oracle").unwrap();
    let (f, _, kh, kw) = k.dims4("oracle").unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b.data()[fi];
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * stride + i) as isize - pad as isize;
                                let ix = (ox * stride + j) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += x.data()
                                        [((ni * c + ci) * h + iy as usize) * w + ix as usize]
                                        * k.data()[((fi * c + ci) * kh + i) * kw + j];
                                }
                            }
                        }
                    }
                    out[((ni * f + fi) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    Tensor::new([n, f, oh, ow], out).unwrap()
}

#[test]
fn conv_identity_kernel_reproduces_input() {
    let x = Tensor::<f32>::uniform([2, 1, 5, 5], 0.0, 1.0, &mut rng(1));
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let k = g.constant(Tensor::ones([1, 1, 1, 1]));
    let b = g.constant(Tensor::zeros([1]));
    let y = g.conv2d(xv, k, b, 1, 0).unwrap();
    assert!(g.value(y).bitwise_eq(&x));
}

#[test]
fn conv_all_ones_on_constant_input_sums_nine() {
    let c = 0.37f64;
    let mut g = Graph::new();
    let xv = g.constant(Tensor::full([1, 1, 6, 6], c));
    let k = g.constant(Tensor::ones([1, 1, 3, 3]));
    let b = g.constant(Tensor::zeros([1]));
    let y = g.conv2d(xv, k, b, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 4, 4]);
    for &v in g.value(y).data() {
        assert!((v - 9.0 * c).abs() < 1e-14);
    }
}

#[test]
fn conv_matches_direct_oracle() {
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let x = randn(&[2, 3, 5, 5], 10 + stride as u64);
        let k = randn(&[4, 3, 3, 3], 20 + pad as u64);
        let b = randn(&[4], 30);
        let want = direct_conv(&x, &k, &b, stride, pad);
        let mut g = Graph::new();
        let (xv, kv, bv) = (g.constant(x), g.constant(k), g.constant(b));
        let y = g.conv2d(xv, kv, bv, stride, pad).unwrap();
        assert_eq!(g.shape(y), want.shape());
        for (a, b) in g.value(y).data().iter().zip(want.data()) {
            assert!(
                (a - b).abs() < 1e-12,
                "stride {stride} pad {pad}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn conv_rejects_channel_mismatch_naming_both_shapes() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros([1, 2, 4, 4]));
    let k = g.constant(Tensor::zeros([3, 5, 3, 3]));
    let b = g.constant(Tensor::zeros([3]));
    let err = g.conv2d(x, k, b, 1, 0).unwrap_err();
    let msg = err.to_string();
    assert!(
        msg.contains("[1, 2, 4, 4]") && msg.contains("[3, 5, 3, 3]"),
        "{msg}"
    );
    let big = g.constant(Tensor::zeros([3, 2, 7, 7]));
    assert!(g.conv2d(x, big, b, 1, 1).is_err());
    let ok = g.constant(Tensor::zeros([3, 2, 3, 3]));
    assert!(g.conv2d(x, ok, b, 0, 0).is_err());
}

fn bn_setup(
    g: &mut Graph<f64>,
    x: Tensor<f64>,
    gamma: Tensor<f64>,
    beta: Tensor<f64>,
) -> (Var, Var, Var) {
    (g.constant(x), g.constant(gamma), g.constant(beta))
}

#[test]
fn batch_norm_of_normalized_input_is_identity() {
    // Per channel: values ±1 with equal counts, so mean 0 and variance 1.
    let (n, c, h, w) = (2, 3, 2, 2);
    let data: Vec<f64> = (0..n * c * h * w)
        .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
        .collect();
    let x = Tensor::new([n, c, h, w], data).unwrap();
    let mut g = Graph::new();
    let (xv, gv, bv) = bn_setup(&mut g, x.clone(), Tensor::ones([c]), Tensor::zeros([c]));
    let eps = 1e-5;
    let out = g
        .batch_norm(xv, gv, bv, &RunningStats::new(c), BnMode::Train, eps)
        .unwrap();
    for (a, b) in g.value(out.output).data().iter().zip(x.data()) {
        assert!((a - b).abs() < eps, "{a} vs {b}");
    }
}

#[test]
fn batch_norm_zero_scale_outputs_beta() {
    let x = randn(&[4, 3, 3, 3], 2);
    let beta = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
    let mut g = Graph::new();
    let (xv, gv, bv) = bn_setup(&mut g, x, Tensor::zeros([3]), beta.clone());
    let out = g
        .batch_norm(xv, gv, bv, &RunningStats::new(3), BnMode::Train, 1e-5)
        .unwrap();
    let y = g.value(out.output);
    for (i, &v) in y.data().iter().enumerate() {
        assert_eq!(v, beta.data()[(i / 9) % 3]);
    }
}

#[test]
fn batch_norm_statistics_match_direct_computation() {
    let x = randn(&[8, 4, 6, 6], 3);
    let mut g = Graph::new();
    let (xv, gv, bv) = bn_setup(&mut g, x.clone(), Tensor::ones([4]), Tensor::zeros([4]));
    let out = g
        .batch_norm(xv, gv, bv, &RunningStats::new(4), BnMode::Train, 1e-5)
        .unwrap();
    for ch in 0..4 {
        let vals: Vec<f64> = (0..8)
            .flat_map(|n| {
                let base = (n * 4 + ch) * 36;
                x.data()[base..base + 36].to_vec()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((out.batch_mean.data()[ch] - mean).abs() < 1e-12);
        assert!((out.batch_var.data()[ch] - var).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_running_stats_and_modes() {
    let x = randn(&[4, 2, 3, 3], 4);
    let mut running = RunningStats::<f64>::new(2);
    let mut g = Graph::new();
    let (xv, gv, bv) = bn_setup(&mut g, x, Tensor::ones([2]), Tensor::zeros([2]));
    let out = g
        .batch_norm(xv, gv, bv, &running, BnMode::Train, 1e-5)
        .unwrap();
    running
        .update(&out.batch_mean, &out.batch_var, 0.1)
        .unwrap();
    for ch in 0..2 {
        assert!((running.mean.data()[ch] - 0.1 * out.batch_mean.data()[ch]).abs() < 1e-15);
        assert!((running.var.data()[ch] - (0.9 + 0.1 * out.batch_var.data()[ch])).abs() < 1e-15);
    }
    // Eval mode normalizes with the running statistics.
    let eval = g
        .batch_norm(xv, gv, bv, &running, BnMode::Eval, 0.0)
        .unwrap();
    let xin = g.value(xv).clone();
    for (i, (&y, &xi)) in g
        .value(eval.output)
        .data()
        .iter()
        .zip(xin.data())
        .enumerate()
    {
        let ch = (i / 9) % 2;
        let want = (xi - running.mean.data()[ch]) / running.var.data()[ch].sqrt();
        assert!((y - want).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_train_rejects_single_value_per_channel() {
    let mut g = Graph::<f32>::new();
    let xv = g.constant(Tensor::zeros([1, 2, 1, 1]));
    let gv = g.constant(Tensor::ones([2]));
    let bv = g.constant(Tensor::zeros([2]));
    let err = g
        .batch_norm(xv, gv, bv, &RunningStats::new(2), BnMode::Train, 1e-5)
        .unwrap_err();
    assert!(err.to_string().contains("N·H·W"));
    assert!(g
        .batch_norm(xv, gv, bv, &RunningStats::new(2), BnMode::Eval, 1e-5)
        .is_ok());
}

#[test]
fn cross_entropy_uniform_logits_is_ln_k() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::zeros([3, 10]));
    let l = g
        .softmax_cross_entropy(z, &[0, 4, 9], Reduction::Mean)
        .unwrap();
    assert!((g.value(l).item() - 10f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_saturated_logit_is_zero() {
    let mut g = Graph::<f32>::new();
    let mut logits = Tensor::zeros([1, 5]);
    logits.data_mut()[2] = 1000.0;
    let z = g.constant(logits);
    let l = g.softmax_cross_entropy(z, &[2], Reduction::Mean).unwrap();
    let v = g.value(l).item();
    assert!(v.is_finite() && v.abs() < 1e-6, "{v}");
}

#[test]
fn cross_entropy_matches_log_sum_exp_oracle() {
    let logits = randn(&[4, 7], 5).scale(3.0);
    let labels = [0, 6, 3, 3];
    let mut want = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.data()[i * 7..(i + 1) * 7];
        // Unshifted log-sum-exp; values are small enough not to overflow.
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        want += lse - row[y];
    }
    want /= 4.0;
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let l = g
        .softmax_cross_entropy(z, &labels, Reduction::Mean)
        .unwrap();
    assert!((g.value(l).item() - want).abs() < 1e-12);
    let mut g = Graph::new();
    let z = g.constant(logits);
    let l = g.softmax_cross_entropy(z, &labels, Reduction::Sum).unwrap();
    assert!((g.value(l).item() - 4.0 * want).abs() < 1e-11);
}

#[test]
fn cross_entropy_rejects_out_of_range_label() {
    let mut g = Graph::<f32>::new();
    let z = g.constant(Tensor::zeros([2, 3]));
    let err = g
        .softmax_cross_entropy(z, &[1, 3], Reduction::Mean)
        .unwrap_err();
    assert_eq!(
        err,
        TensorError::LabelOutOfRange {
            label: 3,
            position: 1,
            classes: 3
        }
    );
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot_over_n() {
    let logits = randn(&[3, 4], 6);
    let labels = [1, 0, 3];
    let mut g = Graph::new();
    let z = g.param(logits.clone());
    let l = g
        .softmax_cross_entropy(z, &labels, Reduction::Mean)
        .unwrap();
    g.backward(l).unwrap();
    let grad = g.grad(z).unwrap();
    for i in 0..3 {
        let row = &logits.data()[i * 4..(i + 1) * 4];
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        for j in 0..4 {
            let onehot = if j == labels[i] { 1.0 } else { 0.0 };
            let want = (row[j].exp() / denom - onehot) / 3.0;
            assert!((grad.data()[i * 4 + j] - want).abs() < 1e-14);
        }
    }
}

#[test]
fn stop_gradient_cuts_one_branch_of_a_product() {
    let x = randn(&[5], 7);
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let s = g.stop_gradient(xv);
    let p = g.mul(s, xv).unwrap();
    let l = g.sum(p);
    g.backward(l).unwrap();
    assert!(g.grad(xv).unwrap().bitwise_eq(&x));

    let mut g = Graph::new();
    let xv = g.param(x);
    let s = g.stop_gradient(xv);
    let l = g.sum(s);
    g.backward(l).unwrap();
    assert!(g.grad(xv).is_none());
    assert!(g.grad_or_zeros(xv).data().iter().all(|&v| v == 0.0));
}

#[test]
fn straight_through_examples() {
    // Degenerate pass-through.
    let v = randn(&[2, 3], 8);
    let mut g = Graph::new();
    let cv = g.param(v.clone());
    let qv = g.constant(v.clone());
    let st = g.straight_through(cv, qv).unwrap();
    assert!(g.value(st).bitwise_eq(&v));
    let l = g.sum(st);
    g.backward(l).unwrap();
    assert!(g.grad(cv).unwrap().data().iter().all(|&d| d == 1.0));

    // ∂/∂v Σ st(v, v_q)² = 2·v_q.
    let vq = randn(&[2, 3], 9);
    let mut g = Graph::new();
    let cv = g.param(v);
    let qv = g.param(vq.clone());
    let st = g.straight_through(cv, qv).unwrap();
    let sq = g.mul(st, st).unwrap();
    let l = g.sum(sq);
    g.backward(l).unwrap();
    assert!(g.grad(cv).unwrap().bitwise_eq(&vq.scale(2.0)));
    assert!(g.grad(qv).is_none());

    let bad = g.constant(Tensor::zeros([3, 2]));
    assert!(matches!(
        g.straight_through(cv, bad),
        Err(TensorError::ShapeMismatch { .. })
    ));
}

#[test]
fn backward_twice_is_rejected_and_each_op_visited_once() {
    let mut g = Graph::<f64>::new();
    let x = g.param(randn(&[2, 2], 11));
    let c = g.constant(randn(&[2, 2], 12));
    let a = g.mul(x, x).unwrap(); // 1
    let b = g.add(a, c).unwrap(); // 2
    let d = g.mul(c, c).unwrap(); // constant-only, never visited
    let e = g.add(b, d).unwrap(); // 3
    let l = g.sum(e); // 4
    g.backward(l).unwrap();
    assert_eq!(g.backward_visits(), 4);
    assert_eq!(g.backward(l).unwrap_err(), TensorError::BackwardAlreadyRun);
    let two = g.add(x, x).unwrap();
    assert!(matches!(
        g.backward(two),
        Err(TensorError::BackwardAlreadyRun)
    ));
    let mut fresh = Graph::<f64>::new();
    let v = fresh.param(Tensor::zeros([2]));
    assert!(matches!(
        fresh.backward(v),
        Err(TensorError::NonScalarLoss(_))
    ));
}

#[test]
fn gradcheck_sum_of_squares() {
    for seed in 0..10 {
        let x = randn(&[3, 4], 100 + seed);
        let report = finite_difference_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
        assert!(report.analytic.bitwise_eq(&x.scale(2.0)));
    }
}

#[test]
fn gradcheck_expected_mismatch_for_stop_gradient() {
    let x = randn(&[6], 13);
    let report = finite_difference_check_with(
        |g, x| {
            let s = g.stop_gradient(x);
            Ok(g.sum(s))
        },
        &x,
        &GradCheckOptions {
            expect_mismatch: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.analytic.data().iter().all(|&v| v == 0.0));
    for &(_, fd) in &report.numeric {
        assert!((fd - 1.0).abs() < 1e-8);
    }
    assert!(report.passes(1e-4));
    assert!(report.max_rel_error > 0.99);
}

#[test]
fn every_primitive_passes_finite_difference_check() {
    for (name, shape, f) in primitives() {
        for instance in 0..10u64 {
            let seed = 1000 * instance + name.len() as u64;
            let x = randn(&shape, seed);
            let report = finite_difference_check_with(
                |g, x| f(g, x, seed),
                &x,
                &GradCheckOptions {
                    step: 1e-5,
                    kink_tolerance: Some(0.1),
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(
                report.passes(1e-4),
                "{name} instance {instance}: max rel error {} at {:?}",
                report.max_rel_error,
                report.worst_index
            );
        }
    }
}

#[test]
fn two_layer_conv_net_passes_finite_difference_check() {
    for instance in 0..10u64 {
        let s = 500 + instance;
        let x = randn(&[2, 2, 6, 6], s);
        let k1 = randn(&[3, 2, 3, 3], s + 1).scale(0.5);
        let k2 = randn(&[4, 3, 3, 3], s + 2).scale(0.5);
        let w = randn(&[3, 4 * 3 * 3], s + 3).scale(0.1);
        let report = finite_difference_check_with(
            |g, x| {
                let (k1, k2) = (g.constant(k1.clone()), g.constant(k2.clone()));
                let b1 = g.constant(Tensor::full([3], 0.1));
                let b2 = g.constant(Tensor::zeros([4]));
                let h = g.conv2d(x, k1, b1, 1, 1)?;
                let h = g.relu(h);
                let h = g.conv2d(h, k2, b2, 2, 1)?;
                let h = g.reshape(h, &[2, 36])?;
                let (wv, bv) = (g.constant(w.clone()), g.constant(Tensor::zeros([3])));
                let logits = g.linear(h, wv, bv)?;
                g.softmax_cross_entropy(logits, &[1, 2], Reduction::Mean)
            },
            &x,
            &GradCheckOptions {
                kink_tolerance: Some(0.1),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(
            report.passes(1e-4),
            "instance {instance}: {} at {:?} analytic {:?} numeric {:?} skipped {}",
            report.max_rel_error,
            report.worst_index,
            report.worst_index.map(|i| report.analytic.data()[i]),
            report
                .numeric
                .iter()
                .find(|p| Some(p.0) == report.worst_index),
            report.skipped_kinks
        );
    }
}

proptest! {
    #[test]
    fn straight_through_is_bitwise_pass_through(
        cont in proptest::collection::vec(-5.0f32..5.0, 12),
        quant in proptest::collection::vec(-5.0f32..5.0, 12),
        upstream in proptest::collection::vec(-3.0f32..3.0, 12),
    ) {
        let mut g = Graph::<f32>::new();
        let c = g.param(Tensor::new([3, 4], cont).unwrap());
        let q = g.param(Tensor::new([3, 4], quant.clone()).unwrap());
        let st = g.straight_through(c, q).unwrap();
        prop_assert!(g.value(st).bitwise_eq(&Tensor::new([3, 4], quant).unwrap()));
        let up = Tensor::new([3, 4], upstream).unwrap();
        let u = g.constant(up.clone());
        let p = g.mul(st, u).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        prop_assert!(g.grad(c).unwrap().bitwise_eq(&up));
        prop_assert!(g.grad(q).is_none());
    }

    #[test]
    fn stop_gradient_zeroes_every_leaf_behind_it(vals in proptest::collection::vec(-2.0f64..2.0, 8)) {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::new([2, 4], vals.clone()).unwrap());
        let b = g.param(Tensor::new([2, 4], vals).unwrap());
        let ab = g.mul(a, b).unwrap();
        let r = g.relu(ab);
        let s = g.stop_gradient(r);
        let c = g.param(Tensor::ones([2, 4]));
        let y = g.mul(s, c).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        prop_assert!(g.grad(a).is_none() && g.grad(b).is_none());
        prop_assert!(g.grad(c).is_some());
    }
}
