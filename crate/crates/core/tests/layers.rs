mod common;

use common::{module_gradcheck, naive_conv, random, rng, weighted_sum};
use isdet_core::layers::{
    batch_norm, conv2d, instance_norm, instance_standardize, silu, softmax, Conv2d, ConvNormAct, ConvSpec, Mode,
    NormKind, NormState, Params, RunningStats, DEFAULT_EPS, DEFAULT_MOMENTUM,
};
use isdet_core::tensor::{gradcheck, GradcheckOptions};
use isdet_core::{Error, Tensor};
use proptest::prelude::*;

#[test]
fn pointwise_scaling_kernel() {
    let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let w = Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap();
    let b = Tensor::zeros(&[1]);
    let y = conv2d(&x, &w, Some(&b), &ConvSpec::same(1, 1, 1, true)).unwrap();
    assert_eq!(y.to_vec(), vec![2.0, 4.0, 6.0, 8.0]);
}

#[test]
fn centre_one_kernel_is_identity() {
    let x = random(&[2, 1, 5, 4], 1);
    let mut w = vec![0.0; 9];
    w[4] = 1.0;
    let w = Tensor::new(&[1, 1, 3, 3], w).unwrap();
    let y = conv2d(&x, &w, None, &ConvSpec::same(1, 1, 3, false)).unwrap();
    assert!(y.bit_eq(&x));
}

#[test]
fn conv_matches_naive_oracle() {
    let spec = ConvSpec::same(3, 4, 3, true);
    let x = random(&[2, 3, 5, 5], 2);
    let w = random(&spec.weight_shape(), 3);
    let b = random(&[4], 4);
    let y = conv2d(&x, &w, Some(&b), &spec).unwrap();
    assert_eq!(y.shape(), &[2, 4, 5, 5]);
    assert!(y.max_abs_diff(&naive_conv(&x, &w, Some(&b), &spec)).unwrap() < 1e-10);
}

#[test]
fn conv_rejects_non_integral_extent() {
    let spec = ConvSpec {
        in_channels: 1,
        out_channels: 1,
        kernel: 3,
        stride: 2,
        padding: 1,
        bias: false,
    };
    let x = random(&[1, 1, 4, 4], 0);
    let w = random(&spec.weight_shape(), 1);
    assert!(matches!(conv2d(&x, &w, None, &spec), Err(Error::Shape(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_oracle_on_random_shapes(
        b in 1usize..3, cin in 1usize..5, cout in 1usize..5, h in 1usize..9, w in 1usize..9,
        k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3, bias in any::<bool>(), seed in any::<u64>(),
    ) {
        let pad = (k - 1) / 2;
        let spec = ConvSpec { in_channels: cin, out_channels: cout, kernel: k, stride, padding: pad, bias };
        let x = random(&[b, cin, h, w], seed);
        let wt = random(&spec.weight_shape(), seed ^ 1);
        let bt = bias.then(|| random(&[cout], seed ^ 2));
        match conv2d(&x, &wt, bt.as_ref(), &spec) {
            Ok(y) => {
                let oracle = naive_conv(&x, &wt, bt.as_ref(), &spec);
                prop_assert!(y.max_abs_diff(&oracle).unwrap() < 1e-10);
            }
            Err(e) => {
                // only a non-integral output extent may be refused
                prop_assert!(matches!(e, Error::Shape(_)));
                prop_assert!((h + 2 * pad - k) % stride != 0 || (w + 2 * pad - k) % stride != 0);
            }
        }
    }
}

#[test]
fn instance_norm_hand_example() {
    let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = instance_standardize(&x, 1e-12).unwrap();
    let expected = [-1.3416407865, -0.4472135955, 0.4472135955, 1.3416407865];
    for (a, b) in y.data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn instance_norm_constant_channel_is_zero() {
    let x = Tensor::full(&[2, 3, 3, 3], 7.5);
    let y = instance_norm(&x, &NormState::instance(3)).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn instance_norm_is_batch_decomposable() {
    let mut state = NormState::instance(3);
    state.gain = random(&[3], 5).tracked();
    state.shift = random(&[3], 6).tracked();
    let x = random(&[2, 3, 4, 5], 7);
    let joint = instance_norm(&x, &state).unwrap();
    let parts: Vec<Tensor> = (0..2)
        .map(|i| instance_norm(&x.narrow(0, i, 1).unwrap(), &state).unwrap())
        .collect();
    assert!(Tensor::concat(&parts, 0).unwrap().bit_eq(&joint));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn instance_norm_standardizes(b in 1usize..3, c in 1usize..4, h in 1usize..6, w in 2usize..6, scale in 0.01f64..100.0, seed in any::<u64>()) {
        let x = random(&[b, c, h, w], seed).scale(scale);
        let y = instance_standardize(&x, DEFAULT_EPS).unwrap();
        let n = h * w;
        for (xs, ys) in x.data().chunks(n).zip(y.data().chunks(n)) {
            let mx = xs.iter().sum::<f64>() / n as f64;
            let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n as f64;
            let my = ys.iter().sum::<f64>() / n as f64;
            let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(my.abs() <= 1e-6);
            // eps shrinks the variance by var/(var+eps)
            if vx >= 1e-8 {
                prop_assert!((vy - vx / (vx + DEFAULT_EPS)).abs() <= 1e-9);
            }
            if vx >= 1.0 {
                prop_assert!((vy - 1.0).abs() <= 1e-5);
            }
        }
    }
}

#[test]
fn batch_norm_eval_with_neutral_stats_is_identity() {
    let mut state = NormState::batch(3);
    state.mode = Mode::Eval;
    let x = random(&[2, 3, 4, 4], 8);
    let y = batch_norm(&x, &state).unwrap();
    assert!(y.max_abs_diff(&x).unwrap() < 1e-5);
}

#[test]
fn batch_norm_train_is_odd() {
    let state = NormState::batch(2);
    let x = random(&[3, 2, 2, 3], 9);
    let y = batch_norm(&x, &state).unwrap();
    let y_neg = batch_norm(&x.neg(), &state).unwrap();
    assert!(y.max_abs_diff(&y_neg.neg()).unwrap() < 1e-12);
}

#[test]
fn batch_norm_statistics_match_oracle() {
    let state = NormState::batch(3);
    let x = random(&[2, 3, 3, 4], 10).add_scalar(0.5);
    let y = batch_norm(&x, &state).unwrap();
    let stats = state.running().unwrap();
    for c in 0..3 {
        let mut vals = Vec::new();
        for b in 0..2 {
            for i in 0..3 {
                for j in 0..4 {
                    vals.push(x.at(&[b, c, i, j]));
                }
            }
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        // running stats start at (0, 1)
        assert!((stats.mean[c] - DEFAULT_MOMENTUM * mean).abs() < 1e-12);
        assert!((stats.var[c] - ((1.0 - DEFAULT_MOMENTUM) + DEFAULT_MOMENTUM * var)).abs() < 1e-12);
        let got = y.at(&[1, c, 2, 3]);
        let want = (x.at(&[1, c, 2, 3]) - mean) / (var + DEFAULT_EPS).sqrt();
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_train_needs_two_values() {
    let state = NormState::batch(2);
    assert!(matches!(
        batch_norm(&random(&[1, 2, 1, 1], 0), &state),
        Err(Error::Contract(_))
    ));
}

#[test]
fn batch_norm_eval_is_batch_decomposable() {
    let mut state = NormState::batch(3);
    state
        .set_running(RunningStats {
            mean: vec![0.1, -0.2, 0.3],
            var: vec![0.5, 1.5, 2.0],
        })
        .unwrap();
    state.mode = Mode::Eval;
    let x = random(&[3, 3, 2, 2], 11);
    let joint = batch_norm(&x, &state).unwrap();
    let parts: Vec<Tensor> = (0..3)
        .map(|i| batch_norm(&x.narrow(0, i, 1).unwrap(), &state).unwrap())
        .collect();
    assert!(Tensor::concat(&parts, 0).unwrap().bit_eq(&joint));
}

#[test]
fn running_variance_rejects_negative_values() {
    let mut state = NormState::batch(1);
    assert!(state
        .set_running(RunningStats {
            mean: vec![0.0],
            var: vec![-1.0]
        })
        .is_err());
    assert!(NormState::instance(1).running().is_none());
}

#[test]
fn silu_examples() {
    let x = Tensor::new(&[3], vec![0.0, 1.0, 40.0]).unwrap();
    let y = silu(&x).to_vec();
    assert_eq!(y[0], 0.0);
    assert!((y[1] - 0.7310585786).abs() < 1e-9);
    assert!((y[2] - 40.0).abs() < 1e-12);
}

#[test]
fn softmax_examples() {
    let u = softmax(&Tensor::zeros(&[5]));
    assert!(u.data().iter().all(|v| (v - 0.2).abs() < 1e-15));
    let p = softmax(&Tensor::new(&[2], vec![0.0, 2f64.ln()]).unwrap());
    assert!((p.data()[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((p.data()[1] - 2.0 / 3.0).abs() < 1e-15);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, n in 1usize..8, shift in -50.0f64..50.0, seed in any::<u64>()) {
        let x = random(&[rows, n], seed).scale(20.0);
        let p = softmax(&x);
        for row in p.data().chunks(n) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
        let shifted = softmax(&x.add_scalar(shift));
        prop_assert!(shifted.max_abs_diff(&p).unwrap() <= 1e-12);
    }
}

#[test]
fn conv_passes_gradcheck() {
    let mut r = rng(12);
    for spec in [ConvSpec::same(2, 3, 3, true), ConvSpec::same(3, 2, 1, false)] {
        let conv = Conv2d::new(spec, &mut r);
        let x = random(&[2, spec.in_channels, 4, 3], 13);
        let report = module_gradcheck(&conv, &x, 1e-4, |m, x| weighted_sum(&m.forward(x)?, 14)).unwrap();
        assert!(report.pass, "{spec:?}: {report:?}");
    }
}

#[test]
fn conv_sum_passes_gradcheck() {
    let spec = ConvSpec::same(2, 3, 3, false);
    let f = |t: &[Tensor]| Ok(conv2d(&t[0], &t[1], None, &spec)?.sum());
    let report = gradcheck(
        f,
        &[random(&[1, 2, 4, 4], 1), random(&spec.weight_shape(), 2)],
        GradcheckOptions::default(),
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn norms_pass_gradcheck() {
    for kind in [NormKind::Instance, NormKind::Batch] {
        let mut state = match kind {
            NormKind::Instance => NormState::instance(3),
            NormKind::Batch => NormState::batch(3),
        };
        state.gain = random(&[3], 15).add_scalar(1.5).tracked();
        state.shift = random(&[3], 16).tracked();
        let x = random(&[2, 3, 3, 2], 17);
        let report = module_gradcheck(&state, &x, 1e-4, |m, x| weighted_sum(&m.forward(x)?, 18)).unwrap();
        assert!(report.pass, "{kind:?}: {report:?}");
    }
    let mut state = NormState::batch(2);
    state
        .set_running(RunningStats {
            mean: vec![0.3, -0.1],
            var: vec![0.7, 1.9],
        })
        .unwrap();
    state.set_mode(Mode::Eval);
    let report = module_gradcheck(&state, &random(&[1, 2, 2, 2], 19), 1e-4, |m, x| {
        weighted_sum(&m.forward(x)?, 20)
    })
    .unwrap();
    assert!(report.pass, "eval batch norm: {report:?}");
}

#[test]
fn activations_pass_gradcheck() {
    let x = random(&[2, 6], 21).scale(3.0);
    let report = gradcheck(
        |t| weighted_sum(&silu(&t[0]), 1),
        std::slice::from_ref(&x),
        GradcheckOptions::default(),
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
    let report = gradcheck(|t| weighted_sum(&softmax(&t[0]), 2), &[x], GradcheckOptions::default()).unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn conv_norm_act_passes_gradcheck() {
    let mut r = rng(22);
    for kind in [NormKind::Instance, NormKind::Batch] {
        let block = ConvNormAct::new(2, 3, 3, kind, &mut r);
        let x = random(&[2, 2, 3, 3], 23);
        let report = module_gradcheck(&block, &x, 1e-4, |m, x| weighted_sum(&m.forward(x)?, 24)).unwrap();
        assert!(report.pass, "{kind:?}: {report:?}");
    }
}
