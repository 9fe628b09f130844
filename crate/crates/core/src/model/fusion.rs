//! Dynamic fusion of DP-left, DP-right and RGB features.
//!
//! The three sources are concatenated, two convolutions predict per-source
//! weights, each source is scaled by its weight, and the scaled sources are
//! concatenated again and reduced back to C channels.

use std::rc::Rc;

use super::config::{FusionMode, ScoreNorm};
use crate::error::{Error, Result};
use crate::nn::graph::{index, Var};
use crate::nn::{Ctx, Padding, SpecList};
use crate::tensor::TensorMap;

pub fn declare(specs: &mut SpecList, prefix: &str, c: usize, mode: FusionMode) {
    if mode != FusionMode::ConcatOnly {
        specs.conv(&format!("{prefix}.score1"), 3, 3 * c, c, true);
        specs.prelu(&format!("{prefix}.score1_act"), c);
        let outs = if mode == FusionMode::FeatureWise { 3 } else { 3 * c };
        specs.conv(&format!("{prefix}.score2"), 1, c, outs, true);
    }
    specs.conv(&format!("{prefix}.out"), 3, 3 * c, c, true);
    specs.prelu(&format!("{prefix}.out_act"), c);
}

#[derive(Clone, Debug)]
pub struct FusionVars {
    pub out: Var,
    /// Normalized per-source weights; `None` in concat-only mode.
    pub weights: Option<Var>,
    /// Concatenation of the three scaled sources, (B, H, W, 3C).
    pub scaled: Var,
}

/// Channel `s·C + c` ↔ (c, s) reordering so a softmax over the last axis runs across sources.
fn source_minor(rows: usize, c: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(rows * 3 * c);
    for r in 0..rows {
        for ch in 0..c {
            for s in 0..3 {
                idx.push(r * 3 * c + s * c + ch);
            }
        }
    }
    idx
}

fn source_major(rows: usize, c: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(rows * 3 * c);
    for r in 0..rows {
        for s in 0..3 {
            for ch in 0..c {
                idx.push(r * 3 * c + ch * 3 + s);
            }
        }
    }
    idx
}

fn normalize(ctx: &mut Ctx<'_>, scores: Var, c: usize, mode: FusionMode, norm: ScoreNorm) -> Result<Var> {
    if norm == ScoreNorm::None {
        return Ok(scores);
    }
    if mode == FusionMode::FeatureWise {
        return Ok(ctx.g.softmax_lastdim(scores));
    }
    let shape = ctx.g.shape(scores).to_vec();
    let rows = shape[..3].iter().product();
    let grouped = ctx.g.gather(scores, source_minor(rows, c).into(), vec![rows, c, 3])?;
    let soft = ctx.g.softmax_lastdim(grouped);
    ctx.g.gather(soft, source_major(rows, c).into(), shape)
}

/// Fuses `left`, `right` and `rgb`, all (B, H, W, C). `override_weights`
/// replaces the normalized weights (same shape as the mode's score map); it
/// exists for testing the weighting path in isolation.
#[allow(clippy::too_many_arguments)]
pub fn forward(
    ctx: &mut Ctx<'_>,
    left: Var,
    right: Var,
    rgb: Var,
    prefix: &str,
    mode: FusionMode,
    norm: ScoreNorm,
    override_weights: Option<&TensorMap>,
) -> Result<FusionVars> {
    let shape = ctx.g.shape(rgb).to_vec();
    if ctx.g.shape(left) != shape.as_slice() || ctx.g.shape(right) != shape.as_slice() {
        return Err(Error::shape(format!(
            "fusion inputs must share a shape: left {:?}, right {:?}, rgb {shape:?}",
            ctx.g.shape(left),
            ctx.g.shape(right)
        )));
    }
    let [b, h, w, c] = ctx.g.value(rgb).dims4()?;
    let cat = ctx.g.concat(&[left, right, rgb])?;
    if mode == FusionMode::ConcatOnly {
        let y = ctx.conv(cat, &format!("{prefix}.out"), 1, Padding::Same)?;
        let out = ctx.prelu(y, &format!("{prefix}.out_act"))?;
        return Ok(FusionVars { out, weights: None, scaled: cat });
    }

    let weights = match override_weights {
        Some(t) => ctx.g.constant(t.clone()),
        None => {
            let s = ctx.conv(cat, &format!("{prefix}.score1"), 1, Padding::Same)?;
            let mut s = ctx.prelu(s, &format!("{prefix}.score1_act"))?;
            if mode == FusionMode::ChannelWise {
                s = ctx.g.mean_hw(s)?;
            }
            let s = ctx.conv(s, &format!("{prefix}.score2"), 1, Padding::Same)?;
            normalize(ctx, s, c, mode, norm)?
        }
    };
    let wshape = ctx.g.shape(weights).to_vec();
    let expected = match mode {
        FusionMode::FeatureWise => vec![b, h, w, 3],
        FusionMode::PixelWise => vec![b, h, w, 3 * c],
        _ => vec![b, 1, 1, 3 * c],
    };
    if wshape != expected {
        return Err(Error::shape(format!("fusion weights {wshape:?}, expected {expected:?}")));
    }

    let rows: usize = wshape[..3].iter().product();
    let per_source = if mode == FusionMode::FeatureWise { 1 } else { c };
    let mut scaled = Vec::with_capacity(3);
    for (s, src) in [left, right, rgb].into_iter().enumerate() {
        let mut ws = wshape.clone();
        ws[3] = per_source;
        let slice: Rc<[usize]> = index::channel_slice(rows, wshape[3], s * per_source, per_source).into();
        let wv = ctx.g.gather(weights, slice, ws)?;
        scaled.push(ctx.g.mul(src, wv)?);
    }
    let scaled = ctx.g.concat(&scaled)?;
    let y = ctx.conv(scaled, &format!("{prefix}.out"), 1, Padding::Same)?;
    let out = ctx.prelu(y, &format!("{prefix}.out_act"))?;
    Ok(FusionVars { out, weights: Some(weights), scaled })
}
