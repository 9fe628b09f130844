//! The RGB + DP depth network and its single-modality training variants.
//!
//! Parameter names are grouped by prefix so that weights can be carried
//! between training stages: `rgb.` (RGB encoder), `dp.` (siamese DP encoder),
//! `fuse.` (fusion), `dec.` (decoder) and `bridge.` (DP-only wiring).

mod config;
pub mod fusion;
mod variants;

pub use config::{FusionMode, ModelConfig, ScoreNorm};
pub use variants::{ablation_variants, Variant};

use crate::error::{Error, Result};
use crate::nn::{Ctx, Padding, ParamSet, SpecList, Var};
use crate::tensor::TensorMap;
use crate::wbipam;

/// Which network to assemble.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ModelKind {
    /// RGB and DP encoders, fusion, decoder.
    #[default]
    Full,
    /// DP encoder feeding the decoder through a bridge (first transfer stage).
    DpOnly,
    /// RGB encoder and decoder (second transfer stage).
    RgbOnly,
}

pub const RGB: &str = "rgb.";
pub const DP: &str = "dp.";
pub const FUSION: &str = "fuse.";
pub const DECODER: &str = "dec.";
pub const BRIDGE: &str = "bridge.";

/// One aligned batch of network inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInputs {
    /// (B, H, W, 3)
    pub rgb: TensorMap,
    /// (B, H, W, 1)
    pub dp_left: TensorMap,
    pub dp_right: TensorMap,
}

/// Predicted normalized inverse depth.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutputs {
    /// (B, H, W, 1), values in (0, 1).
    pub depth: TensorMap,
    /// One map per decoder block, coarse to fine; empty without deep supervision.
    pub intermediates: Vec<TensorMap>,
}

#[derive(Clone, Debug)]
pub struct OutputVars {
    pub depth: Var,
    pub intermediates: Vec<Var>,
}

fn declare_rgb(specs: &mut SpecList, cfg: &ModelConfig) {
    specs.conv("rgb.stem", 3, 3, cfg.base_channels, true);
    specs.prelu("rgb.stem_act", cfg.base_channels);
    for i in 1..=cfg.stages {
        specs.inverted_residual(&format!("rgb.s{i}"), cfg.stage_channels(i - 1), cfg.stage_channels(i), cfg.expansion);
    }
}

fn declare_dp(specs: &mut SpecList, cfg: &ModelConfig) {
    for i in 1..=cfg.dp_depth {
        let cin = if i == 1 { 1 } else { cfg.stage_channels(i - 1) };
        let c = cfg.stage_channels(i);
        specs.inverted_residual(&format!("dp.b{i}.ir"), cin, c, cfg.expansion);
        if cfg.wbipam != wbipam::WbipamMode::Disabled {
            wbipam::declare(specs, &format!("dp.b{i}.att"), c, c);
        }
    }
}

fn declare_decoder(specs: &mut SpecList, cfg: &ModelConfig) {
    for j in 1..=cfg.stages {
        let up = cfg.decoder_channels(j - 1);
        let skip = cfg.stage_channels(cfg.stages - j);
        let out = cfg.decoder_channels(j);
        specs.conv(&format!("dec.b{j}"), 3, up + skip, out, true);
        specs.prelu(&format!("dec.b{j}_act"), out);
        if cfg.deep_supervision {
            specs.conv(&format!("dec.h{j}"), 1, out, 1, true);
        }
    }
    specs.conv("dec.out", 3, cfg.decoder_channels(cfg.stages), 1, true);
}

fn declare_bridge(specs: &mut SpecList, cfg: &ModelConfig) {
    specs.conv("bridge.stem", 3, 2, cfg.base_channels, true);
    specs.prelu("bridge.stem_act", cfg.base_channels);
    for i in 1..=cfg.dp_depth {
        let c = cfg.stage_channels(i);
        specs.conv(&format!("bridge.merge{i}"), 1, 2 * c, c, true);
    }
    for i in cfg.dp_depth + 1..=cfg.stages {
        specs.inverted_residual(&format!("bridge.s{i}"), cfg.stage_channels(i - 1), cfg.stage_channels(i), cfg.expansion);
    }
}

/// Parameter declarations of the requested network.
pub fn declare(cfg: &ModelConfig, kind: ModelKind) -> Result<SpecList> {
    cfg.validate()?;
    let mut specs = SpecList::new();
    match kind {
        ModelKind::Full => {
            declare_rgb(&mut specs, cfg);
            declare_dp(&mut specs, cfg);
            for i in 1..=cfg.dp_depth {
                fusion::declare(&mut specs, &format!("fuse.s{i}"), cfg.stage_channels(i), cfg.fusion);
            }
        }
        ModelKind::DpOnly => {
            declare_dp(&mut specs, cfg);
            declare_bridge(&mut specs, cfg);
        }
        ModelKind::RgbOnly => declare_rgb(&mut specs, cfg),
    }
    declare_decoder(&mut specs, cfg);
    Ok(specs)
}

/// Freshly initialized parameters of the full network, drawn from `cfg.seed`.
pub fn build_model(cfg: &ModelConfig) -> Result<ParamSet> {
    build(cfg, ModelKind::Full, cfg.seed)
}

pub fn build(cfg: &ModelConfig, kind: ModelKind, seed: u64) -> Result<ParamSet> {
    Ok(declare(cfg, kind)?.materialize(seed))
}

fn check_input(ctx: &Ctx<'_>, x: Var, cfg: &ModelConfig, channels: usize, what: &str) -> Result<()> {
    let [_, h, w, c] = ctx.g.value(x).dims4()?;
    if (h, w, c) != (cfg.height, cfg.width, channels) {
        return Err(Error::shape(format!(
            "{what} is {:?}, expected (B, {}, {}, {channels})",
            ctx.g.shape(x),
            cfg.height,
            cfg.width
        )));
    }
    Ok(())
}

/// Full-resolution stem output and the stride-2..2^S stage features of the
/// RGB encoder. `fuse` may replace a stage's output before it feeds the next
/// stage; it receives the 1-based stage index.
pub fn rgb_encoder<F>(ctx: &mut Ctx<'_>, rgb: Var, cfg: &ModelConfig, mut fuse: F) -> Result<(Var, Vec<Var>)>
where
    F: FnMut(&mut Ctx<'_>, usize, Var) -> Result<Var>,
{
    check_input(ctx, rgb, cfg, 3, "RGB input")?;
    let x = ctx.conv(rgb, "rgb.stem", 1, Padding::Same)?;
    let stem = ctx.prelu(x, "rgb.stem_act")?;
    let mut feats = Vec::with_capacity(cfg.stages);
    let mut x = stem;
    for i in 1..=cfg.stages {
        x = ctx.inverted_residual(x, &format!("rgb.s{i}"), 2)?;
        x = fuse(ctx, i, x)?;
        feats.push(x);
    }
    Ok((stem, feats))
}

/// Siamese DP encoder: per block, shared-weight inverted residual on both
/// views followed by window attention. Returns one (left, right) pair per block.
pub fn dp_encoder(ctx: &mut Ctx<'_>, left: Var, right: Var, cfg: &ModelConfig) -> Result<Vec<(Var, Var)>> {
    check_input(ctx, left, cfg, 1, "left DP input")?;
    check_input(ctx, right, cfg, 1, "right DP input")?;
    let wcfg = cfg.wbipam_config();
    let (mut l, mut r) = (left, right);
    let mut out = Vec::with_capacity(cfg.dp_depth);
    for i in 1..=cfg.dp_depth {
        let name = format!("dp.b{i}.ir");
        l = ctx.inverted_residual(l, &name, 2)?;
        r = ctx.inverted_residual(r, &name, 2)?;
        (l, r) = wbipam::forward(ctx, l, r, &format!("dp.b{i}.att"), &wcfg)?;
        out.push((l, r));
    }
    Ok(out)
}

/// UNet decoder from the deepest feature up to full resolution. `skips[i-1]`
/// is the stride-2^i feature; `stem` is the full-resolution one.
pub fn decoder(ctx: &mut Ctx<'_>, stem: Var, skips: &[Var], cfg: &ModelConfig) -> Result<OutputVars> {
    if skips.len() != cfg.stages {
        return Err(Error::shape(format!("decoder needs {} skip features, got {}", cfg.stages, skips.len())));
    }
    let mut y = skips[cfg.stages - 1];
    let mut intermediates = Vec::new();
    for j in 1..=cfg.stages {
        let [_, h, w, _] = ctx.g.value(y).dims4()?;
        let up = ctx.g.resize_bilinear(y, 2 * h, 2 * w)?;
        let skip = if j < cfg.stages { skips[cfg.stages - 1 - j] } else { stem };
        let cat = ctx.g.concat(&[up, skip])?;
        let z = ctx.conv(cat, &format!("dec.b{j}"), 1, Padding::Same)?;
        y = ctx.prelu(z, &format!("dec.b{j}_act"))?;
        if cfg.deep_supervision {
            let hj = ctx.conv(y, &format!("dec.h{j}"), 1, Padding::Same)?;
            intermediates.push(ctx.g.sigmoid(hj));
        }
    }
    let d = ctx.conv(y, "dec.out", 1, Padding::Same)?;
    Ok(OutputVars { depth: ctx.g.sigmoid(d), intermediates })
}

fn full_forward(ctx: &mut Ctx<'_>, rgb: Var, left: Var, right: Var, cfg: &ModelConfig) -> Result<OutputVars> {
    let pairs = dp_encoder(ctx, left, right, cfg)?;
    let (stem, feats) = rgb_encoder(ctx, rgb, cfg, |ctx, i, x| match pairs.get(i - 1) {
        Some(&(l, r)) => Ok(fusion::forward(ctx, l, r, x, &format!("fuse.s{i}"), cfg.fusion, cfg.score_norm, None)?.out),
        None => Ok(x),
    })?;
    decoder(ctx, stem, &feats, cfg)
}

fn dp_only_forward(ctx: &mut Ctx<'_>, left: Var, right: Var, cfg: &ModelConfig) -> Result<OutputVars> {
    let pairs = dp_encoder(ctx, left, right, cfg)?;
    let both = ctx.g.concat(&[left, right])?;
    let s = ctx.conv(both, "bridge.stem", 1, Padding::Same)?;
    let stem = ctx.prelu(s, "bridge.stem_act")?;
    let mut feats = Vec::with_capacity(cfg.stages);
    for (i, &(l, r)) in pairs.iter().enumerate() {
        let lr = ctx.g.concat(&[l, r])?;
        feats.push(ctx.conv(lr, &format!("bridge.merge{}", i + 1), 1, Padding::Same)?);
    }
    let mut x = *feats.last().expect("dp_depth >= 1");
    for i in cfg.dp_depth + 1..=cfg.stages {
        x = ctx.inverted_residual(x, &format!("bridge.s{i}"), 2)?;
        feats.push(x);
    }
    decoder(ctx, stem, &feats, cfg)
}

fn rgb_only_forward(ctx: &mut Ctx<'_>, rgb: Var, cfg: &ModelConfig) -> Result<OutputVars> {
    let (stem, feats) = rgb_encoder(ctx, rgb, cfg, |_, _, x| Ok(x))?;
    decoder(ctx, stem, &feats, cfg)
}

/// Runs `kind` on inputs already placed in the graph.
pub fn forward_vars(ctx: &mut Ctx<'_>, kind: ModelKind, cfg: &ModelConfig, rgb: Var, left: Var, right: Var) -> Result<OutputVars> {
    cfg.validate()?;
    match kind {
        ModelKind::Full => full_forward(ctx, rgb, left, right, cfg),
        ModelKind::DpOnly => dp_only_forward(ctx, left, right, cfg),
        ModelKind::RgbOnly => rgb_only_forward(ctx, rgb, cfg),
    }
}

/// Places `inputs` in the graph as constants and runs `kind`.
pub fn forward_inputs(ctx: &mut Ctx<'_>, kind: ModelKind, cfg: &ModelConfig, inputs: &ModelInputs) -> Result<OutputVars> {
    let rgb = ctx.g.constant(inputs.rgb.clone());
    let l = ctx.g.constant(inputs.dp_left.clone());
    let r = ctx.g.constant(inputs.dp_right.clone());
    forward_vars(ctx, kind, cfg, rgb, l, r)
}

pub fn run(params: &ParamSet, kind: ModelKind, cfg: &ModelConfig, inputs: &ModelInputs) -> Result<ForwardOutputs> {
    let mut ctx = Ctx::new(params);
    let out = forward_inputs(&mut ctx, kind, cfg, inputs)?;
    Ok(ForwardOutputs {
        depth: ctx.g.value(out.depth).clone(),
        intermediates: out.intermediates.iter().map(|&v| ctx.g.value(v).clone()).collect(),
    })
}

/// Full-network inference.
pub fn infer(params: &ParamSet, cfg: &ModelConfig, inputs: &ModelInputs) -> Result<ForwardOutputs> {
    run(params, ModelKind::Full, cfg, inputs)
}

/// Plain-tensor RGB encoder: the stage features at strides 2..2^S.
pub fn rgb_encoder_forward(params: &ParamSet, cfg: &ModelConfig, rgb: &TensorMap) -> Result<Vec<TensorMap>> {
    let mut ctx = Ctx::new(params);
    let x = ctx.g.constant(rgb.clone());
    let (_, feats) = rgb_encoder(&mut ctx, x, cfg, |_, _, x| Ok(x))?;
    Ok(feats.iter().map(|&v| ctx.g.value(v).clone()).collect())
}

/// Plain-tensor DP encoder.
pub fn dp_encoder_forward(params: &ParamSet, cfg: &ModelConfig, left: &TensorMap, right: &TensorMap) -> Result<Vec<(TensorMap, TensorMap)>> {
    let mut ctx = Ctx::new(params);
    let l = ctx.g.constant(left.clone());
    let r = ctx.g.constant(right.clone());
    let pairs = dp_encoder(&mut ctx, l, r, cfg)?;
    Ok(pairs.iter().map(|&(a, b)| (ctx.g.value(a).clone(), ctx.g.value(b).clone())).collect())
}

/// Plain-tensor fusion at stage `stage`; returns the fused map and the
/// normalized weights (absent in concat-only mode).
pub fn fusion_forward(
    params: &ParamSet,
    cfg: &ModelConfig,
    stage: usize,
    left: &TensorMap,
    right: &TensorMap,
    rgb: &TensorMap,
    override_weights: Option<&TensorMap>,
) -> Result<(TensorMap, Option<TensorMap>, TensorMap)> {
    let mut ctx = Ctx::new(params);
    let (l, r, x) = (ctx.g.constant(left.clone()), ctx.g.constant(right.clone()), ctx.g.constant(rgb.clone()));
    let f = fusion::forward(&mut ctx, l, r, x, &format!("fuse.s{stage}"), cfg.fusion, cfg.score_norm, override_weights)?;
    Ok((ctx.g.value(f.out).clone(), f.weights.map(|w| ctx.g.value(w).clone()), ctx.g.value(f.scaled).clone()))
}
