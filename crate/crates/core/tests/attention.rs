mod common;

use dpdepth::wbipam::{
    bipam_attention, effective_window, strip_count, wbipam_forward, window_merge, window_partition, Axis, WbipamConfig, WbipamMode,
    WbipamParams,
};
use dpdepth::TensorMap;
use proptest::prelude::*;
use rand::Rng;

fn random_map(seed: u64, dims: [usize; 4]) -> TensorMap {
    let mut r = common::rng(seed);
    TensorMap::from_fn(dims.to_vec(), |_| r.gen_range(-2.0..2.0))
}

fn axis_of(v: bool) -> Axis {
    if v {
        Axis::Vertical
    } else {
        Axis::Horizontal
    }
}

#[test]
fn partition_rejects_indivisible_extents() {
    let x = random_map(0, [1, 6, 8, 2]);
    assert!(window_partition(&x, 4, Axis::Vertical).is_err());
    assert!(window_partition(&x, 0, Axis::Vertical).is_err());
}

#[test]
fn strip_count_matches_partition() {
    let x = random_map(1, [2, 8, 16, 3]);
    let w = window_partition(&x, 4, Axis::Horizontal).unwrap();
    assert_eq!(w.strips(), strip_count([2, 8, 16, 3], 4));
    assert_eq!(w.data.shape(), &[2 * 2 * 4 * 4, 4, 3]);
}

#[test]
fn no_window_mode_spans_the_epipolar_line() {
    let cfg = WbipamConfig { mode: WbipamMode::NoWindow, ..Default::default() };
    assert_eq!(effective_window(&cfg, [1, 16, 32, 4]), 16);
    let cfg = WbipamConfig { axis: Axis::Horizontal, ..cfg };
    assert_eq!(effective_window(&cfg, [1, 16, 32, 4]), 32);
}

#[test]
fn block_preserves_shape_and_handles_padding() {
    let p = WbipamParams::random(4, 2, 3).unwrap();
    for (dims, window) in [([1, 8, 8, 4], 4), ([2, 12, 8, 4], 8), ([1, 4, 4, 4], 8)] {
        let l = random_map(4, dims);
        let r = random_map(5, dims);
        let cfg = WbipamConfig { window, ..Default::default() };
        let (ol, or) = wbipam_forward(&l, &r, &p, &cfg).unwrap();
        assert_eq!(ol.shape(), &dims);
        assert_eq!(or.shape(), &dims);
        assert!(ol.is_finite() && or.is_finite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partition_merge_round_trip(seed in any::<u64>(), ki in 0usize..3, vertical in any::<bool>(), b in 1usize..3, th in 1usize..3, tw in 1usize..3, c in 1usize..4) {
        let k = [2, 4, 8][ki];
        let x = random_map(seed, [b, th * k, tw * k, c]);
        let w = window_partition(&x, k, axis_of(vertical)).unwrap();
        prop_assert!(window_merge(&w).unwrap().bit_eq(&x));
    }

    #[test]
    fn strips_follow_the_epipolar_axis(seed in any::<u64>(), vertical in any::<bool>()) {
        let k = 4;
        let x = random_map(seed, [1, 8, 8, 1]);
        let w = window_partition(&x, k, axis_of(vertical)).unwrap();
        // First strip of the first tile: column 0 (vertical) or row 0 (horizontal).
        for i in 0..k {
            let expected = if vertical { x.data()[i * 8] } else { x.data()[i] };
            prop_assert_eq!(w.data.data()[i], expected);
        }
    }

    #[test]
    fn attention_rows_are_stochastic_and_transposed(seed in any::<u64>(), ki in 0usize..3, c in 1usize..5, proj in 1usize..4, scaled in any::<bool>()) {
        let k = [2, 4, 8][ki];
        let p = WbipamParams::random(c, proj, seed).unwrap();
        let l = window_partition(&random_map(seed ^ 1, [1, k, 2 * k, c]), k, Axis::Vertical).unwrap();
        let r = window_partition(&random_map(seed ^ 2, [1, k, 2 * k, c]), k, Axis::Vertical).unwrap();
        let out = bipam_attention(&l, &r, &p, scaled).unwrap();
        let (a_lr, a_rl) = (&out.maps.a_lr, &out.maps.a_rl);
        let n = l.strips();
        prop_assert_eq!(a_lr.shape(), &[n, k, k]);
        for s in 0..n {
            for i in 0..k {
                let row = &a_lr.data()[(s * k + i) * k..(s * k + i + 1) * k];
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
                for j in 0..k {
                    prop_assert_eq!(a_rl.data()[(s * k + j) * k + i].to_bits(), row[j].to_bits());
                }
            }
        }
    }
}
