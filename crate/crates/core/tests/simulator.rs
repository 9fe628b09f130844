mod common;

use std::fs;

use dpdepth::dpsim::{
    disparity_map, fmap, generate_sample, generate_scene, make_dataset, read_sample, render_dp, split_of, warp_pair, write_sample,
    Manifest, SimConfig, Split, MANIFEST_NAME, MAX_DISPARITY,
};
use dpdepth::error::FormatError;
use dpdepth::wbipam::Axis;
use dpdepth::{Error, TensorMap};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn scenes_are_deterministic_per_seed() {
    assert_eq!(generate_scene(11, 64, 64), generate_scene(11, 64, 64));
    assert_ne!(generate_scene(11, 64, 64).invdepth, generate_scene(12, 64, 64).invdepth);
    let sc = SimConfig::default();
    assert!(generate_sample(3, &sc).unwrap().bit_eq(&generate_sample(3, &sc).unwrap()));
}

#[test]
fn nearest_covering_layer_sets_inverse_depth() {
    for seed in 0..10 {
        let s = generate_scene(seed, 64, 64);
        assert!((3..=8).contains(&s.layers.len()));
        for y in 0..64 {
            for x in 0..64 {
                let v = s.invdepth.data()[y * 64 + x];
                match s.layers.iter().rev().find(|l| l.covers(y, x)) {
                    Some(l) => assert_eq!(v, l.invdepth as f32 as f64),
                    None => assert!((0.0..=0.15).contains(&v)),
                }
            }
        }
        assert!(s.layers.windows(2).all(|w| w[0].invdepth <= w[1].invdepth));
    }
}

#[test]
fn zero_defocus_gives_identical_views() {
    let scene = generate_scene(4, 64, 64);
    let sc = SimConfig { gain: 0.0, ..Default::default() };
    let (l, r, m) = render_dp(&scene.rgb, &scene.invdepth, &sc).unwrap();
    assert!(l.bit_eq(&r));
    assert!(m.data().iter().all(|&v| v == 1.0));
}

#[test]
fn in_focus_layer_is_not_shifted() {
    let scene = generate_scene(6, 64, 64);
    let focus = scene.layers.last().unwrap().invdepth as f32 as f64;
    let sc = SimConfig { focus, blur: false, ..Default::default() };
    let (l, r, _) = render_dp(&scene.rgb, &scene.invdepth, &sc).unwrap();
    for i in 0..64 * 64 {
        if scene.invdepth.data()[i] == focus {
            assert_eq!(l.data()[i], r.data()[i]);
            assert_eq!(l.data()[i], scene.rgb.data()[3 * i + 1] as f32 as f64);
        }
    }
}

#[test]
fn integer_shift_moves_rows_exactly() {
    let gray = TensorMap::from_fn(vec![8, 4, 1], |i| i as f64);
    let d = TensorMap::full(vec![8, 4, 1], 2.0);
    let (l, r, m) = warp_pair(&gray, &d, Axis::Vertical).unwrap();
    // Left samples one row below, right one row above.
    for y in 1..7 {
        for x in 0..4 {
            assert_eq!(l.data()[y * 4 + x], gray.data()[(y + 1) * 4 + x]);
            assert_eq!(r.data()[y * 4 + x], gray.data()[(y - 1) * 4 + x]);
            assert_eq!(m.data()[y * 4 + x], 1.0);
        }
    }
    assert!((0..4).all(|x| m.data()[x] == 0.0 && m.data()[28 + x] == 0.0));
}

#[test]
fn sample_files_round_trip_and_have_expected_size() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate_sample(21, &SimConfig::default()).unwrap();
    write_sample(&s, dir.path()).unwrap();
    assert!(read_sample(dir.path()).unwrap().bit_eq(&s));
    assert_eq!(fs::metadata(dir.path().join("invdepth.fmap")).unwrap().len(), 16401);
    assert_eq!(fs::metadata(dir.path().join("rgb.fmap")).unwrap().len(), 17 + 64 * 64 * 3 * 4);
}

#[test]
fn bad_magic_and_truncation_are_rejected() {
    let mut bytes = fmap::encode(&TensorMap::full(vec![2, 3, 1], 0.5)).unwrap();
    assert_eq!(bytes.len(), fmap::HEADER_LEN + 24);
    assert_eq!(&bytes[5..9], &3u32.to_le_bytes());
    assert!(matches!(fmap::decode(&bytes[..bytes.len() - 1]), Err(FormatError::Truncated { .. })));
    bytes[0] = b'X';
    assert!(matches!(fmap::decode(&bytes), Err(FormatError::BadMagic { .. })));
}

#[test]
fn partial_sample_directory_fails_whole() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate_sample(2, &SimConfig::default()).unwrap();
    write_sample(&s, dir.path()).unwrap();
    fs::write(dir.path().join("mask.fmap"), b"FMAP").unwrap();
    assert!(matches!(read_sample(dir.path()), Err(Error::Format { .. })));
    fs::remove_file(dir.path().join("dpl.fmap")).unwrap();
    assert!(matches!(read_sample(dir.path()), Err(Error::Io { .. })));
}

#[test]
fn split_rule_is_eighty_ten_ten() {
    let count = |s| (0..100).filter(|&i| split_of(i) == s).count();
    assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (80, 10, 10));
}

#[test]
fn dataset_manifest_lists_every_sample() {
    let dir = tempfile::tempdir().unwrap();
    let entries = make_dataset(12, 7, dir.path(), &SimConfig::default()).unwrap();
    assert_eq!(entries.len(), 12);
    let m = Manifest::open(dir.path()).unwrap();
    assert_eq!(m.entries, entries);
    assert_eq!(Manifest::open(&dir.path().join(MANIFEST_NAME)).unwrap().entries, entries);
    let test = m.load(Some(Split::Test)).unwrap();
    assert_eq!(test.len(), 1);
    assert!(test[0].bit_eq(&generate_sample(7 + 8, &SimConfig::default()).unwrap()));
}

#[test]
fn size_must_be_a_multiple_of_64() {
    let sc = SimConfig { height: 48, ..Default::default() };
    assert!(matches!(generate_sample(0, &sc), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn flipping_disparity_swaps_views(seed in any::<u64>(), vertical in any::<bool>()) {
        let mut r = common::rng(seed);
        let gray = TensorMap::from_fn(vec![16, 16, 1], |_| r.gen_range(0.0..1.0));
        let d = TensorMap::from_fn(vec![16, 16, 1], |_| r.gen_range(-8.0..8.0));
        let axis = if vertical { Axis::Vertical } else { Axis::Horizontal };
        let (l, rr, m) = warp_pair(&gray, &d, axis).unwrap();
        let (l2, r2, m2) = warp_pair(&gray, &d.map(|v| -v), axis).unwrap();
        prop_assert!(l.bit_eq(&r2) && rr.bit_eq(&l2) && m.bit_eq(&m2));
    }

    #[test]
    fn disparity_is_clamped(seed in any::<u64>(), gain in 0.0f64..200.0, focus in 0.0f64..1.0) {
        let s = generate_scene(seed, 64, 64);
        let sc = SimConfig { gain, focus, ..Default::default() };
        prop_assert!(disparity_map(&s.invdepth, &sc).data().iter().all(|d| d.abs() <= MAX_DISPARITY));
    }

    #[test]
    fn fmap_round_trip_is_bit_exact(seed in any::<u64>(), h in 1usize..9, w in 1usize..9, c in 1usize..4) {
        let mut r = common::rng(seed);
        let t = TensorMap::from_fn(vec![h, w, c], |_| r.gen_range(-1e3..1e3)).quantize_f32();
        prop_assert!(fmap::decode(&fmap::encode(&t).unwrap()).unwrap().bit_eq(&t));
    }
}
