mod common;

use common::{random, reconstruct_oracle, weighted_sum};
use isdet_core::attention::{
    attention_weights, fcgsa, fcgsa_probe, reassemble, reassemble_stages, reconstruct, reconstruct_stages,
    score_matrix, split_qkv, PatchGrid, ScalePlacement,
};
use isdet_core::profiler::{attention_flops, FlopConvention};
use isdet_core::tensor::{gradcheck, GradcheckOptions};
use isdet_core::{Error, Precision, Tensor};
use proptest::prelude::*;

#[test]
fn single_patch_pipeline_shapes() {
    let x = Tensor::new(&[1, 3, 4, 4], (0..48).map(f64::from).collect()).unwrap();
    let rec = reconstruct_stages(&x, 4).unwrap();
    assert_eq!(rec.unfolded.shape(), &[1, 48, 1]);
    assert_eq!(rec.split.shape(), &[1, 3, 16, 1]);
    assert_eq!(rec.output.shape(), &[1, 16, 3, 1]);
    assert_eq!(rec.grid.l(), 1);
    let back = reassemble(&rec.output, 4, 4, 4).unwrap();
    assert_eq!(back.shape(), &[1, 3, 4, 4]);
    assert!(back.bit_eq(&x));
}

#[test]
fn patch_count_examples() {
    let x = random(&[1, 2, 8, 8], 0);
    assert_eq!(reconstruct(&x, 4).unwrap().shape(), &[1, 16, 2, 4]);
    let x = random(&[2, 2, 5, 5], 1);
    let y = reconstruct(&x, 4).unwrap();
    assert_eq!(y.shape(), &[2, 16, 2, 4]);
    assert!(y.bit_eq(&reconstruct_oracle(&x, 4)));
}

#[test]
fn exhaustive_round_trip_sweep() {
    for k in 1..=8 {
        for h in 1..=32 {
            for w in 1..=32 {
                let x = random(&[1, 2, h, w], (k * 1024 + h * 32 + w) as u64);
                let y = reconstruct(&x, k).unwrap();
                assert!(y.bit_eq(&reconstruct_oracle(&x, k)), "K={k} {h}×{w}");
                assert!(reassemble(&y, k, h, w).unwrap().bit_eq(&x), "K={k} {h}×{w}");
            }
        }
    }
}

#[test]
fn grid_matches_floor_formula() {
    for k in 1..=8 {
        for h in 1..=32 {
            for w in 1..=32 {
                let g = PatchGrid::new(h, w, k).unwrap();
                let formula = ((h - 1) / k + 1) * ((w - 1) / k + 1);
                assert_eq!(g.l(), formula);
                assert_eq!(g.padded_h % k, 0);
                assert_eq!(g.padded_w % k, 0);
            }
        }
    }
}

#[test]
fn reassemble_rejects_wrong_patch_count() {
    let y = random(&[1, 16, 3, 4], 2);
    assert!(matches!(reassemble(&y, 4, 4, 4), Err(Error::Shape(_))));
    assert!(matches!(reassemble(&y, 2, 8, 8), Err(Error::Shape(_))));
}

#[test]
fn split_examples() {
    let x = random(&[1, 16, 24, 5], 3);
    let (q, k, v) = split_qkv(&x).unwrap();
    for t in [&q, &k, &v] {
        assert_eq!(t.shape(), &[1, 16, 8, 5]);
    }
    assert_eq!(q.at(&[0, 3, 2, 1]), x.at(&[0, 3, 2, 1]));
    assert_eq!(k.at(&[0, 3, 2, 1]), x.at(&[0, 3, 10, 1]));
    assert_eq!(v.at(&[0, 3, 2, 1]), x.at(&[0, 3, 18, 1]));
    assert!(Tensor::concat(&[q, k, v], 2).unwrap().bit_eq(&x));
    assert!(matches!(split_qkv(&random(&[1, 2, 10, 3], 4)), Err(Error::Shape(_))));
}

#[test]
fn zero_queries_average_the_values() {
    let q = Tensor::zeros(&[2, 3, 4, 5]);
    let k = random(&[2, 3, 4, 5], 5);
    let v = random(&[2, 3, 4, 5], 6);
    let f = fcgsa(&q, &k, &v).unwrap();
    for b in 0..2 {
        for p in 0..3 {
            for l in 0..5 {
                let mean = (0..4).map(|c| v.at(&[b, p, c, l])).sum::<f64>() / 4.0;
                for c in 0..4 {
                    assert!((f.at(&[b, p, c, l]) - mean).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn identity_inputs_match_hand_evaluation() {
    // c₂ = 2, L = 2, Q = K = V = I: scores I/√2, F = softmax rows
    let i = Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let f = fcgsa(&i, &i, &i).unwrap();
    let e = (1.0 / 2f64.sqrt()).exp();
    let hi = e / (e + 1.0);
    let lo = 1.0 / (e + 1.0);
    let expected = [hi, lo, lo, hi];
    for (a, b) in f.data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-15);
    }
}

fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
    let parts: Vec<Tensor> = perm.iter().map(|&r| x.narrow(2, r, 1).unwrap()).collect();
    Tensor::concat(&parts, 2).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn weight_rows_are_distributions(b in 1usize..3, p in 1usize..5, c2 in 1usize..7, l in 1usize..9, mag in 0.1f64..30.0, seed in any::<u64>()) {
        let q = random(&[b, p, c2, l], seed).scale(mag);
        let k = random(&[b, p, c2, l], seed ^ 7).scale(mag);
        let w = attention_weights(&q, &k).unwrap();
        for row in w.data().chunks(c2) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn channel_permutation_equivariance(c2 in 1usize..7, l in 1usize..9, seed in any::<u64>(), perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let (q, k, v) = (random(&[1, 2, c2, l], seed), random(&[1, 2, c2, l], seed ^ 1), random(&[1, 2, c2, l], seed ^ 2));
        let mut perm: Vec<usize> = (0..c2).collect();
        perm.shuffle(&mut common::rng(perm_seed));
        let f = fcgsa(&q, &k, &v).unwrap();
        let fp = fcgsa(&permute_rows(&q, &perm), &permute_rows(&k, &perm), &permute_rows(&v, &perm)).unwrap();
        let expected = permute_rows(&f, &perm);
        for (a, b) in fp.data().iter().zip(expected.data()) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0));
        }
    }

    #[test]
    fn pre_and_post_scaling_agree(c2 in 1usize..7, l in 1usize..300, seed in any::<u64>()) {
        let q = random(&[1, 2, c2, l], seed).scale(10.0);
        let k = random(&[1, 2, c2, l], seed ^ 3).scale(10.0);
        let pre = score_matrix(&q, &k, ScalePlacement::PreScaled, Precision::F64).unwrap();
        let post = score_matrix(&q, &k, ScalePlacement::PostScaled, Precision::F64).unwrap();
        let scale: f64 = q.data().iter().map(|v| v.abs()).fold(0.0, f64::max)
            * k.data().iter().map(|v| v.abs()).fold(0.0, f64::max)
            * (l as f64).sqrt();
        for (a, b) in pre.data().iter().zip(post.data()) {
            // relative to the magnitude the partial sums can reach
            prop_assert!((a - b).abs() <= 1e-12 * scale);
        }
    }
}

#[test]
fn pre_scaling_matches_tracked_attention() {
    let q = random(&[2, 3, 4, 6], 7);
    let k = random(&[2, 3, 4, 6], 8);
    let scores = score_matrix(&q, &k, ScalePlacement::PreScaled, Precision::F64).unwrap();
    let reference = q.scale(1.0 / 6f64.sqrt()).matmul(&k.transpose_last().unwrap()).unwrap();
    assert!(scores.max_abs_diff(&reference).unwrap() < 1e-14);
}

/// Q is +1e19 everywhere; K alternates sign in blocks of eight along L.
fn overflow_inputs(c2: usize, l: usize) -> (Tensor, Tensor, Tensor) {
    let q = Tensor::full(&[1, 1, c2, l], 1e19);
    let k_data = (0..c2 * l)
        .map(|i| if (i % l) % 16 < 8 { 1e19 } else { -1e19 })
        .collect();
    let k = Tensor::new(&[1, 1, c2, l], k_data).unwrap();
    (q, k, random(&[1, 1, c2, l], 9))
}

#[test]
fn low_precision_overflow_only_after_the_product() {
    let (q, k, v) = overflow_inputs(4, 256);
    let pre = score_matrix(&q, &k, ScalePlacement::PreScaled, Precision::F32).unwrap();
    let post = score_matrix(&q, &k, ScalePlacement::PostScaled, Precision::F32).unwrap();
    assert!(pre.all_finite(), "{:?}", pre.data());
    assert!(post.data().iter().any(|v| !v.is_finite()));
    let f_pre = fcgsa_probe(&q, &k, &v, ScalePlacement::PreScaled, Precision::F32).unwrap();
    let f_post = fcgsa_probe(&q, &k, &v, ScalePlacement::PostScaled, Precision::F32).unwrap();
    assert!(f_pre.all_finite());
    assert!(!f_post.all_finite());
    // 64-bit has headroom for both placements
    let post64 = score_matrix(&q, &k, ScalePlacement::PostScaled, Precision::F64).unwrap();
    assert!(post64.all_finite());
}

#[test]
fn fcgsa_passes_gradcheck() {
    let f = |t: &[Tensor]| weighted_sum(&fcgsa(&t[0], &t[1], &t[2])?, 10);
    let inputs: Vec<Tensor> = (0..3).map(|i| random(&[1, 4, 3, 5], 11 + i)).collect();
    let report = gradcheck(f, &inputs, GradcheckOptions::default()).unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn full_pipeline_passes_gradcheck() {
    // reconstruct → split → attention → reassemble on a non-divisible map
    let f = |t: &[Tensor]| {
        let (q, k, v) = split_qkv(&reconstruct(&t[0], 2)?)?;
        weighted_sum(&reassemble(&fcgsa(&q, &k, &v)?, 2, 3, 5)?, 12)
    };
    let report = gradcheck(f, &[random(&[1, 6, 3, 5], 13)], GradcheckOptions::default()).unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn slice_decomposability() {
    let (b, p, c2, l) = (2, 3, 4, 5);
    let q = random(&[b, p, c2, l], 14);
    let k = random(&[b, p, c2, l], 15);
    let v = random(&[b, p, c2, l], 16);
    let joint = fcgsa(&q, &k, &v).unwrap();
    let slice = |t: &Tensor, bi: usize, pi: usize| t.narrow(0, bi, 1).unwrap().narrow(1, pi, 1).unwrap();
    let mut stacked = Vec::new();
    for bi in 0..b {
        for pi in 0..p {
            let f = fcgsa(&slice(&q, bi, pi), &slice(&k, bi, pi), &slice(&v, bi, pi)).unwrap();
            stacked.extend(f.to_vec());
        }
    }
    assert_eq!(joint.to_vec(), stacked);
}

#[test]
fn counted_flops_are_linear_in_patch_count() {
    let conv = FlopConvention::default();
    for (k, c2) in [(4, 8), (2, 3), (8, 1)] {
        for l in [1, 7, 64, 1000] {
            assert_eq!(
                attention_flops(k, c2, 2 * l, &conv),
                2 * attention_flops(k, c2, l, &conv)
            );
        }
    }
    let l_at = |h, w| PatchGrid::new(h, w, 4).unwrap().l();
    assert_eq!(
        attention_flops(4, 8, l_at(64, 64), &conv),
        2 * attention_flops(4, 8, l_at(64, 32), &conv)
    );
}

#[test]
fn fused_and_composed_paths_agree() {
    for (k, h, w) in [(4, 8, 8), (3, 7, 5), (2, 1, 9), (5, 4, 4)] {
        let x = random(&[2, 3, h, w], (k * h * w) as u64).tracked();
        let fused = reconstruct(&x, k).unwrap();
        let composed = reconstruct_stages(&x, k).unwrap().output;
        assert!(fused.bit_eq(&composed), "K={k} {h}×{w}");
        let back = reassemble(&fused, k, h, w).unwrap();
        assert!(back.bit_eq(&reassemble_stages(&composed, k, h, w).unwrap()));

        let g_fused = isdet_core::backward(&weighted_sum(&reassemble(&fused, k, h, w).unwrap(), 7).unwrap()).unwrap();
        let g_comp =
            isdet_core::backward(&weighted_sum(&reassemble_stages(&composed, k, h, w).unwrap(), 7).unwrap()).unwrap();
        assert!(g_fused.wrt(&x).bit_eq(&g_comp.wrt(&x)));
    }
}
