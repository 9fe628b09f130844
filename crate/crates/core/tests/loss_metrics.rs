mod common;

use dpdepth::loss::{affine_align, grad_matching, si_mae, total_loss, LossConfig};
use dpdepth::metrics::{aiwe, srcc, MetricsRow};
use dpdepth::TensorMap;
use proptest::prelude::*;

fn map(v: &[f64]) -> TensorMap {
    TensorMap::new(vec![1, v.len(), 1], v.to_vec()).unwrap()
}

fn batched(t: &TensorMap) -> TensorMap {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    t.clone().reshape(vec![1, h, w, 1]).unwrap()
}

#[test]
fn affine_fit_examples() {
    let t = map(&[0.1, 0.4, 0.2, 0.9]);
    let ones = map(&[1.0; 4]);
    let f = affine_align(&t, &t, &ones).unwrap();
    assert!((f.a - 1.0).abs() < 1e-12 && f.b.abs() < 1e-12);
    let p = t.map(|v| 2.0 * v + 3.0);
    let f = affine_align(&p, &t, &ones).unwrap();
    assert!((f.a - 0.5).abs() < 1e-12 && (f.b + 1.5).abs() < 1e-12);
}

#[test]
fn constant_prediction_takes_the_degenerate_branch() {
    let p = map(&[0.3; 4]);
    let t = map(&[0.0, 1.0, 0.0, 1.0]);
    let f = affine_align(&p, &t, &map(&[1.0; 4])).unwrap();
    assert_eq!((f.a, f.b), (0.0, 0.5));
    assert!((si_mae(&p, &t, &map(&[1.0; 4])).unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn empty_mask_is_an_error() {
    let t = map(&[0.1, 0.2]);
    assert!(affine_align(&t, &t, &map(&[0.0, 0.0])).is_err());
    assert!(si_mae(&t, &t, &map(&[0.0, 0.0])).is_err());
}

#[test]
fn ramp_residual_has_slope_gradient() {
    // pred is constant after alignment, so R = −target, and a ramp of slope s
    // along x gives a scale-0 term of s plus 0 along y.
    let (h, w, s) = (4, 6, 0.05);
    let target = TensorMap::from_fn(vec![h, w, 1], |i| (i % w) as f64 * s);
    let pred = TensorMap::full(vec![h, w, 1], 0.2);
    let mask = TensorMap::full(vec![h, w, 1], 1.0);
    assert!((grad_matching(&pred, &target, &mask, 1).unwrap() - s).abs() < 1e-12);
}

#[test]
fn srcc_examples() {
    let ones = map(&[1.0; 4]);
    let t = map(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(srcc(&t, &t, &ones).unwrap(), 1.0);
    assert_eq!(srcc(&t.map(|v| -v), &t, &ones).unwrap(), -1.0);
    let tied = map(&[1.0, 2.0, 2.0, 4.0]);
    let expected = 3.0 / 10f64.sqrt();
    assert!((srcc(&tied, &t, &ones).unwrap() - expected).abs() < 1e-12);
    assert_eq!(srcc(&map(&[5.0; 4]), &t, &ones).unwrap(), 0.0);
}

#[test]
fn oracle_agreement_on_random_maps() {
    for seed in 0..40 {
        let (p, t, m) = common::random_triplet(seed, 16, 16);
        let (a, b) = common::fit(&p, &t, &m);
        let f = affine_align(&p, &t, &m).unwrap();
        assert!(common::rel_close(f.a, a, 1e-9) && common::rel_close(f.b, b, 1e-9), "seed {seed}");
        assert!(common::rel_close(si_mae(&p, &t, &m).unwrap(), common::si_mae(&p, &t, &m), 1e-9));
        assert!(common::rel_close(grad_matching(&p, &t, &m, 4).unwrap(), common::grad_matching(&p, &t, &m, 4), 1e-9));
        assert!(common::rel_close(aiwe(&p, &t, &m, 2).unwrap(), common::aiwe2(&p, &t, &m), 1e-9));
        assert!(common::rel_close(srcc(&p, &t, &m).unwrap(), common::srcc(&p, &t, &m), 1e-7));
    }
}

#[test]
fn lambda_zero_total_loss_is_mean_si_mae() {
    let (p, t, m) = common::random_triplet(5, 8, 8);
    let lc = LossConfig { lambda: 0.0, keep_orientation: false, ..Default::default() };
    let half = |x: &TensorMap| {
        TensorMap::from_fn(vec![1, 4, 4, 1], |i| {
            let (y, xx) = (i / 4, i % 4);
            (0..4).map(|k| x.data()[(2 * y + k / 2) * 8 + 2 * xx + k % 2]).sum::<f64>() / 4.0
        })
    };
    let got = total_loss(&batched(&p), &[half(&p)], &batched(&t), &batched(&m), &lc).unwrap();
    assert!(got.is_finite() && got >= 0.0);
    let full_only = total_loss(&batched(&p), &[], &batched(&t), &batched(&m), &lc).unwrap();
    assert!((full_only - common::si_mae(&p, &t, &m)).abs() < 1e-12);
}

#[test]
fn perfect_prediction_has_zero_loss() {
    let (_, t, m) = common::random_triplet(9, 8, 8);
    let lc = LossConfig::default();
    assert!(total_loss(&batched(&t), &[], &batched(&t), &batched(&m), &lc).unwrap().abs() < 1e-12);
}

#[test]
fn metric_row_bounds() {
    let (p, t, m) = common::random_triplet(3, 16, 16);
    let row = MetricsRow::single("r", &p, &t, &m).unwrap();
    assert!((0.0..=2.0).contains(&row.one_minus_srcc));
    assert!(row.aiwe2 >= row.aiwe1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_invariant_to_positive_affine_maps(seed in 0u64..10_000, a in 0.05f64..20.0, b in -5.0f64..5.0) {
        let (p, t, m) = common::random_triplet(seed, 8, 8);
        let lc = LossConfig::default();
        let base = total_loss(&batched(&p), &[], &batched(&t), &batched(&m), &lc).unwrap();
        let moved = total_loss(&batched(&p.map(|v| a * v + b)), &[], &batched(&t), &batched(&m), &lc).unwrap();
        prop_assert!((base - moved).abs() <= 1e-8 * (1.0 + base.abs()));
    }

    #[test]
    fn free_orientation_loss_is_invariant_to_any_affine_map(seed in 0u64..10_000, a in 0.05f64..20.0, neg in any::<bool>(), b in -5.0f64..5.0) {
        let a = if neg { -a } else { a };
        let (p, t, m) = common::random_triplet(seed, 8, 8);
        let lc = LossConfig { keep_orientation: false, ..Default::default() };
        let base = total_loss(&batched(&p), &[], &batched(&t), &batched(&m), &lc).unwrap();
        let moved = total_loss(&batched(&p.map(|v| a * v + b)), &[], &batched(&t), &batched(&m), &lc).unwrap();
        prop_assert!((base - moved).abs() <= 1e-8 * (1.0 + base.abs()));
    }

    #[test]
    fn affine_related_pairs_score_zero(seed in 0u64..10_000, a in 0.1f64..10.0, neg in any::<bool>(), b in -3.0f64..3.0) {
        let a = if neg { -a } else { a };
        let (_, t, m) = common::random_triplet(seed, 16, 16);
        let p = t.map(|v| a * v + b);
        prop_assert!(aiwe(&p, &t, &m, 1).unwrap() < 1e-8);
        prop_assert!(aiwe(&p, &t, &m, 2).unwrap() < 1e-8);
        prop_assert!(grad_matching(&p, &t, &m, 4).unwrap() < 1e-8);
    }

    #[test]
    fn srcc_ignores_increasing_transforms(seed in 0u64..10_000) {
        let (p, t, m) = common::random_triplet(seed, 16, 16);
        let base = srcc(&p, &t, &m).unwrap();
        prop_assert_eq!(srcc(&p.map(f64::exp), &t, &m).unwrap(), base);
        prop_assert_eq!(srcc(&p, &t.map(|v| v * v * v), &m).unwrap(), base);
    }

    #[test]
    fn aiwe2_dominates_aiwe1(seed in 0u64..10_000) {
        let (p, t, m) = common::random_triplet(seed, 16, 16);
        prop_assert!(aiwe(&p, &t, &m, 2).unwrap() >= aiwe(&p, &t, &m, 1).unwrap() - 1e-15);
    }
}
