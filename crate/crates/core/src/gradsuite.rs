//! Module-by-module finite-difference checks of every differentiable path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{self, LossConfig};
use crate::model::{self, FusionMode, ModelConfig, ModelKind, ScoreNorm};
use crate::nn::graph::index;
use crate::nn::{grad_check_with, Ctx, GradCheckOptions, GradReport, Padding, ParamSet, SpecList, Var};
use crate::tensor::TensorMap;
use crate::wbipam::{self, Axis, WbipamConfig, WbipamMode};

/// One checked case and its tolerance.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub module: &'static str,
    pub case: String,
    pub tolerance: f64,
    pub report: GradReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error() <= self.tolerance
    }
}

pub const MODULE_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
/// Relative errors are taken against max(|analytic|, |numeric|, FLOOR), so
/// gradients far below this magnitude are compared with an absolute tolerance.
pub const FLOOR: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Σ x ⊙ R for a fixed random R, so every output entry gets a distinct weight.
pub fn probe(ctx: &mut Ctx<'_>, x: Var, seed: u64) -> Result<Var> {
    let r = TensorMap::randn(ctx.g.shape(x).to_vec(), 1.0, &mut rng(seed ^ 0x5eed));
    let r = ctx.g.constant(r);
    let y = ctx.g.mul(x, r)?;
    Ok(ctx.g.sum(y))
}

fn with_input(mut params: ParamSet, shape: Vec<usize>, seed: u64) -> ParamSet {
    params.insert("x", TensorMap::randn(shape, 1.0, &mut rng(seed)));
    params
}

fn options() -> GradCheckOptions {
    GradCheckOptions { eps: 1e-5, max_entries: Some(24), floor: FLOOR, ..Default::default() }
}

fn check<F>(module: &'static str, case: impl Into<String>, params: &ParamSet, opts: &GradCheckOptions, tolerance: f64, f: F) -> Result<SuiteEntry>
where
    F: Fn(&mut Ctx<'_>) -> Result<Var>,
{
    Ok(SuiteEntry { module, case: case.into(), tolerance, report: grad_check_with(f, params, opts)? })
}

fn nn_core(out: &mut Vec<SuiteEntry>) -> Result<()> {
    let opts = options();
    let m = "nn-core";
    let mut s = SpecList::new();
    s.conv("c", 3, 3, 4, true);
    s.depthwise("d", 3, 3);
    s.prelu("a", 3);
    for (stride, pad) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid), (2, Padding::Valid)] {
        let p = with_input(s.materialize(1), vec![2, 7, 8, 3], 2);
        out.push(check(m, format!("conv2d stride {stride} {pad:?}"), &p, &opts, MODULE_TOLERANCE, |ctx| {
            let x = ctx.p("x")?;
            let y = ctx.conv(x, "c", stride, pad)?;
            probe(ctx, y, 3)
        })?);
        out.push(check(m, format!("depthwise stride {stride} {pad:?}"), &p, &opts, MODULE_TOLERANCE, |ctx| {
            let x = ctx.p("x")?;
            let (w, b) = (ctx.p("d.w")?, ctx.p("d.b")?);
            let y = ctx.g.depthwise_conv2d(x, w, Some(b), stride, pad)?;
            probe(ctx, y, 4)
        })?);
    }
    let mut p = with_input(s.materialize(5), vec![1, 6, 6, 3], 6);
    p.get_mut("a.alpha").expect("declared").data_mut().copy_from_slice(&[0.25, -0.4, 1.3]);
    out.push(check(m, "prelu", &p, &opts, MODULE_TOLERANCE, |ctx| {
        let x = ctx.p("x")?;
        let y = ctx.prelu(x, "a")?;
        probe(ctx, y, 7)
    })?);
    out.push(check(m, "sigmoid", &p, &opts, MODULE_TOLERANCE, |ctx| {
        let x = ctx.p("x")?;
        let y = ctx.g.sigmoid(x);
        probe(ctx, y, 8)
    })?);
    out.push(check(m, "softmax", &p, &opts, MODULE_TOLERANCE, |ctx| {
        let x = ctx.p("x")?;
        let y = ctx.g.softmax_lastdim(x);
        probe(ctx, y, 9)
    })?);
    for (h2, w2) in [(8, 8), (3, 5), (12, 6)] {
        out.push(check(m, format!("resize to {h2}x{w2}"), &p, &opts, MODULE_TOLERANCE, |ctx| {
            let x = ctx.p("x")?;
            let y = ctx.g.resize_bilinear(x, h2, w2)?;
            probe(ctx, y, 10)
        })?);
    }
    out.push(check(m, "concat, gather, mean, broadcast mul", &p, &opts, MODULE_TOLERANCE, |ctx| {
        let x = ctx.p("x")?;
        let s = ctx.g.sigmoid(x);
        let c = ctx.g.concat(&[x, s, x])?;
        let sl = ctx.g.gather(c, index::channel_slice(36, 9, 2, 4).into(), vec![1, 6, 6, 4])?;
        let padded = ctx.g.gather(sl, index::pad_bottom_right([1, 6, 6, 4], 8, 7).into(), vec![1, 8, 7, 4])?;
        let mean = ctx.g.mean_hw(padded)?;
        let y = ctx.g.mul(padded, mean)?;
        probe(ctx, y, 11)
    })?);
    let mut bp = ParamSet::new();
    bp.insert("a", TensorMap::randn(vec![3, 4, 5], 1.0, &mut rng(12)));
    bp.insert("b", TensorMap::randn(vec![3, 5, 2], 1.0, &mut rng(13)));
    bp.insert("bt", TensorMap::randn(vec![3, 2, 5], 1.0, &mut rng(14)));
    out.push(check(m, "bmm", &bp, &opts, MODULE_TOLERANCE, |ctx| {
        let (a, b, bt) = (ctx.p("a")?, ctx.p("b")?, ctx.p("bt")?);
        let y = ctx.g.bmm(a, b, false)?;
        let z = ctx.g.bmm(a, bt, true)?;
        let yz = ctx.g.add(y, z)?;
        probe(ctx, yz, 15)
    })?);
    let mut s = SpecList::new();
    s.inverted_residual("ir", 4, 4, 3);
    s.inverted_residual("down", 4, 6, 2);
    let p = with_input(s.materialize(16), vec![1, 8, 8, 4], 17);
    out.push(check(m, "inverted residual", &p, &opts, MODULE_TOLERANCE, |ctx| {
        let x = ctx.p("x")?;
        let y = ctx.inverted_residual(x, "ir", 1)?;
        let z = ctx.inverted_residual(y, "down", 2)?;
        probe(ctx, z, 18)
    })?);
    Ok(())
}

fn attention(out: &mut Vec<SuiteEntry>) -> Result<()> {
    let opts = options();
    let mut s = SpecList::new();
    wbipam::declare(&mut s, "att", 4, 3);
    let mut p = s.materialize(20);
    p.insert("l", TensorMap::randn(vec![1, 8, 8, 4], 1.0, &mut rng(21)));
    p.insert("r", TensorMap::randn(vec![1, 8, 8, 4], 1.0, &mut rng(22)));
    // Non-zero biases and slopes away from the default exercise more of the backward path.
    for name in ["att.res.b", "att.post.b"] {
        let t = p.get_mut(name).expect("declared");
        *t = TensorMap::randn(t.shape().to_vec(), 0.1, &mut rng(23));
    }
    let cases = [
        ("full, vertical, k=4", WbipamConfig { window: 4, ..Default::default() }),
        ("full, horizontal, k=2", WbipamConfig { window: 2, axis: Axis::Horizontal, ..Default::default() }),
        ("full, k=3 padded, scaled", WbipamConfig { window: 3, scaled: true, ..Default::default() }),
        ("no window", WbipamConfig { mode: WbipamMode::NoWindow, ..Default::default() }),
        ("unidirectional", WbipamConfig { window: 4, mode: WbipamMode::Unidirectional, ..Default::default() }),
    ];
    for (name, cfg) in cases {
        out.push(check("wbipam", name, &p, &opts, MODULE_TOLERANCE, |ctx| {
            let (l, r) = (ctx.p("l")?, ctx.p("r")?);
            let (a, b) = wbipam::forward(ctx, l, r, "att", &cfg)?;
            let both = ctx.g.concat(&[a, b])?;
            probe(ctx, both, 24)
        })?);
    }
    Ok(())
}

fn small_config() -> ModelConfig {
    ModelConfig { height: 8, width: 8, base_channels: 2, stages: 3, expansion: 2, dp_depth: 2, window: 2, ..ModelConfig::default() }
}

fn model_parts(out: &mut Vec<SuiteEntry>) -> Result<()> {
    let opts = options();
    let cfg = small_config();
    let mut p = model::build(&cfg, ModelKind::Full, 30)?;
    p.insert("dpl", TensorMap::uniform(vec![1, 8, 8, 1], 0.0, 1.0, &mut rng(31)));
    p.insert("dpr", TensorMap::uniform(vec![1, 8, 8, 1], 0.0, 1.0, &mut rng(32)));
    out.push(check("model", "dp encoder, two blocks", &p, &opts, MODULE_TOLERANCE, |ctx| {
        let (l, r) = (ctx.p("dpl")?, ctx.p("dpr")?);
        let pairs = model::dp_encoder(ctx, l, r, &cfg)?;
        let (a, b) = pairs[1];
        let y = ctx.g.concat(&[a, b])?;
        probe(ctx, y, 33)
    })?);

    for (mode, norm) in [
        (FusionMode::FeatureWise, ScoreNorm::Softmax),
        (FusionMode::PixelWise, ScoreNorm::Softmax),
        (FusionMode::ChannelWise, ScoreNorm::Softmax),
        (FusionMode::FeatureWise, ScoreNorm::None),
        (FusionMode::ConcatOnly, ScoreNorm::Softmax),
    ] {
        let c = 4;
        let mut s = SpecList::new();
        model::fusion::declare(&mut s, "f", c, mode);
        let mut fp = s.materialize(34);
        for (i, n) in ["fl", "fr", "fi"].into_iter().enumerate() {
            fp.insert(n, TensorMap::randn(vec![1, 6, 6, c], 1.0, &mut rng(35 + i as u64)));
        }
        out.push(check("model", format!("fusion {mode:?} {norm:?}"), &fp, &opts, MODULE_TOLERANCE, |ctx| {
            let (l, r, x) = (ctx.p("fl")?, ctx.p("fr")?, ctx.p("fi")?);
            let f = model::fusion::forward(ctx, l, r, x, "f", mode, norm, None)?;
            probe(ctx, f.out, 38)
        })?);
    }

    let mut dp = model::build(&cfg, ModelKind::RgbOnly, 40)?;
    dp.insert("rgb", TensorMap::uniform(vec![1, 8, 8, 3], 0.0, 1.0, &mut rng(41)));
    out.push(check("model", "rgb encoder and decoder", &dp, &opts, MODULE_TOLERANCE, |ctx| {
        let x = ctx.p("rgb")?;
        let (stem, feats) = model::rgb_encoder(ctx, x, &cfg, |_, _, x| Ok(x))?;
        let o = model::decoder(ctx, stem, &feats, &cfg)?;
        let mut total = probe(ctx, o.depth, 42)?;
        for (k, &v) in o.intermediates.iter().enumerate() {
            let t = probe(ctx, v, 43 + k as u64)?;
            total = ctx.g.add(total, t)?;
        }
        Ok(total)
    })?);
    Ok(())
}

fn losses(out: &mut Vec<SuiteEntry>) -> Result<()> {
    let opts = GradCheckOptions { eps: 1e-6, max_entries: None, floor: FLOOR, ..Default::default() };
    let mut p = ParamSet::new();
    p.insert("pred", TensorMap::uniform(vec![2, 8, 8, 1], 0.0, 1.0, &mut rng(50)));
    p.insert("mid", TensorMap::uniform(vec![2, 4, 4, 1], 0.0, 1.0, &mut rng(51)));
    let target = TensorMap::uniform(vec![2, 8, 8, 1], 0.0, 1.0, &mut rng(52));
    let mask = TensorMap::from_fn(vec![2, 8, 8, 1], |i| if (i * 7) % 11 == 3 { 0.0 } else { 1.0 });
    // Anti-correlated with the prediction, so the orientation-keeping fit flips.
    let reversed = TensorMap::from_fn(vec![2, 8, 8, 1], |i| 1.0 - p.get("pred").expect("inserted").data()[i] + 0.1 * target.data()[i]);
    for (name, lc, target) in [
        ("total loss", LossConfig::default(), &target),
        ("total loss, reversed target", LossConfig::default(), &reversed),
        ("total loss, free orientation", LossConfig { keep_orientation: false, ..Default::default() }, &reversed),
        ("total loss, 2 scales", LossConfig { lambda: 3.0, scales: 2, weights: Some(vec![2.0, 1.0]), keep_orientation: false, lambda_ramp: 0 }, &target),
    ] {
        out.push(check("loss-metrics", name, &p, &opts, MODULE_TOLERANCE, |ctx| {
            let (pr, mid) = (ctx.p("pred")?, ctx.p("mid")?);
            loss::total_loss_var(&mut ctx.g, pr, &[mid], target, &mask, &lc)
        })?);
    }
    Ok(())
}

fn end_to_end(out: &mut Vec<SuiteEntry>) -> Result<()> {
    let cfg = ModelConfig::tiny();
    let opts = GradCheckOptions { eps: 1e-5, max_entries: Some(3), floor: FLOOR, ..Default::default() };
    let p = model::build(&cfg, ModelKind::Full, 60)?;
    let inputs = model::ModelInputs {
        rgb: TensorMap::uniform(vec![1, 32, 32, 3], 0.0, 1.0, &mut rng(61)),
        dp_left: TensorMap::uniform(vec![1, 32, 32, 1], 0.0, 1.0, &mut rng(62)),
        dp_right: TensorMap::uniform(vec![1, 32, 32, 1], 0.0, 1.0, &mut rng(63)),
    };
    out.push(check("end-to-end", "32x32 full network", &p, &opts, END_TO_END_TOLERANCE, |ctx| {
        let o = model::forward_inputs(ctx, ModelKind::Full, &cfg, &inputs)?;
        probe(ctx, o.depth, 64)
    })?);
    Ok(())
}

/// Runs every check. Errors (shape problems, non-finite values) abort the suite.
pub fn run_suite() -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    nn_core(&mut out)?;
    attention(&mut out)?;
    model_parts(&mut out)?;
    losses(&mut out)?;
    end_to_end(&mut out)?;
    Ok(out)
}

/// Worst relative error per module, in suite order, with the module's pass flag.
pub fn summarize(entries: &[SuiteEntry]) -> Vec<(&'static str, f64, bool)> {
    let mut rows: Vec<(&'static str, f64, bool)> = Vec::new();
    for e in entries {
        let err = e.report.max_rel_error();
        match rows.iter_mut().find(|r| r.0 == e.module) {
            Some(r) => {
                r.1 = r.1.max(err);
                r.2 &= e.passed();
            }
            None => rows.push((e.module, err, e.passed())),
        }
    }
    rows
}
