use dpdepth::dpsim::{generate_sample, Batch, SimConfig};
use dpdepth::model::{ablation_variants, build, declare, infer, run, ModelConfig, ModelKind, DP, FUSION, RGB};

fn desk_batch(n: u64) -> Batch {
    let samples: Vec<_> = (0..n).map(|i| generate_sample(40 + i, &SimConfig::default()).unwrap()).collect();
    Batch::from_samples(&samples.iter().collect::<Vec<_>>()).unwrap()
}

#[test]
fn desk_parameter_counts() {
    // Layer-by-layer hand count of the 64×64, base-16, six-stage network.
    let cfg = ModelConfig::default();
    assert_eq!(declare(&cfg, ModelKind::Full).unwrap().count(), 3_521_221);
    assert_eq!(declare(&cfg, ModelKind::RgbOnly).unwrap().count(), 3_438_583);
    assert_eq!(declare(&cfg, ModelKind::DpOnly).unwrap().count(), 3_447_391);
}

#[test]
fn build_is_seeded_and_names_are_shared_across_kinds() {
    let cfg = ModelConfig::default();
    let a = build(&cfg, ModelKind::Full, 5).unwrap();
    assert!(a.bit_eq(&build(&cfg, ModelKind::Full, 5).unwrap()));
    assert!(!a.bit_eq(&build(&cfg, ModelKind::Full, 6).unwrap()));
    let rgb = build(&cfg, ModelKind::RgbOnly, 5).unwrap();
    let dp = build(&cfg, ModelKind::DpOnly, 5).unwrap();
    // Encoder tensors have the same shapes under every kind that holds them.
    for (name, t) in a.iter() {
        let src = if name.starts_with(RGB) { Some(&rgb) } else if name.starts_with(DP) { Some(&dp) } else { None };
        if let Some(src) = src {
            assert_eq!(src.get(name).unwrap().shape(), t.shape(), "{name}");
        }
    }
    assert!(a.names().any(|n| n.starts_with(FUSION)));
}

#[test]
fn forward_shapes_and_range() {
    let cfg = ModelConfig::default();
    let params = build(&cfg, ModelKind::Full, 0).unwrap();
    let batch = desk_batch(2);
    let out = infer(&params, &cfg, &batch.inputs).unwrap();
    assert_eq!(out.depth.shape(), &[2, 64, 64, 1]);
    assert!(out.depth.data().iter().all(|&v| v > 0.0 && v < 1.0));
    let sizes: Vec<usize> = out.intermediates.iter().map(|t| t.shape()[1]).collect();
    assert_eq!(sizes, [2, 4, 8, 16, 32, 64]);
    for kind in [ModelKind::DpOnly, ModelKind::RgbOnly] {
        let p = build(&cfg, kind, 0).unwrap();
        assert_eq!(run(&p, kind, &cfg, &batch.inputs).unwrap().depth.shape(), &[2, 64, 64, 1]);
    }
}

#[test]
fn batch_items_are_independent() {
    let cfg = ModelConfig::default();
    let params = build(&cfg, ModelKind::Full, 1).unwrap();
    let pair = desk_batch(2);
    let both = infer(&params, &cfg, &pair.inputs).unwrap().depth;
    let first = Batch::from_samples(&[&generate_sample(40, &SimConfig::default()).unwrap()]).unwrap();
    let alone = infer(&params, &cfg, &first.inputs).unwrap().depth;
    assert!(both.batch_item(0).unwrap().max_abs_diff(&alone.batch_item(0).unwrap()) < 1e-12);
}

#[test]
fn wrong_input_size_and_missing_params_fail() {
    let cfg = ModelConfig::default();
    let params = build(&cfg, ModelKind::Full, 0).unwrap();
    let small = ModelConfig::tiny();
    let batch = desk_batch(1);
    assert!(infer(&params, &small, &batch.inputs).is_err());
    let rgb_only = build(&cfg, ModelKind::RgbOnly, 0).unwrap();
    assert!(infer(&rgb_only, &cfg, &batch.inputs).is_err());
}

#[test]
fn every_ablation_variant_builds_and_runs() {
    let base = ModelConfig::tiny();
    let variants = ablation_variants(&base);
    assert_eq!(variants.len(), 11);
    let sim = SimConfig { height: 64, width: 64, ..Default::default() };
    let s = generate_sample(3, &sim).unwrap();
    // The tiny network is 32×32; crop the sample to fit.
    let crop = |t: &dpdepth::TensorMap| {
        let c = t.shape()[2];
        dpdepth::TensorMap::from_fn(vec![1, 32, 32, c], |i| {
            let (y, x, ch) = (i / (32 * c), (i / c) % 32, i % c);
            t.data()[(y * 64 + x) * c + ch]
        })
    };
    let inputs = dpdepth::model::ModelInputs { rgb: crop(&s.rgb), dp_left: crop(&s.dp_left), dp_right: crop(&s.dp_right) };
    for v in &variants {
        let p = build(&v.cfg, ModelKind::Full, 0).unwrap();
        let out = infer(&p, &v.cfg, &inputs).unwrap();
        assert!(out.depth.is_finite(), "{}", v.name);
    }
}
