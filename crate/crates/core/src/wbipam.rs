//! Window bi-directional parallax attention.
//!
//! DP feature maps are cut into k×k tiles, and every tile into k strips of k×1
//! pixels along the epipolar axis. Cross-attention runs independently inside
//! each strip: queries come from the left features, keys from the right, and the
//! reverse score matrix is the exact transpose of the forward one.
//!
//! Stack layout: strip `p` enumerates tiles row-major over (batch, tile row,
//! tile column) and, inside a tile, strips by their orthogonal coordinate
//! (the column for a vertical axis, the row for a horizontal one). Element `i`
//! of a strip is the i-th pixel along the epipolar axis.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::graph::{index, Var};
use crate::nn::{Ctx, Padding, ParamSet, SpecList};
use crate::tensor::TensorMap;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Axis {
    #[default]
    Vertical,
    Horizontal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum WbipamMode {
    #[default]
    Full,
    /// One window spans the entire epipolar line.
    NoWindow,
    /// Attention on the left branch only; the right branch keeps the residual path.
    Unidirectional,
    Disabled,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WbipamConfig {
    pub window: usize,
    pub axis: Axis,
    pub mode: WbipamMode,
    /// Divide scores by √C′ before the softmax.
    pub scaled: bool,
}

impl Default for WbipamConfig {
    fn default() -> Self {
        Self { window: 8, axis: Axis::Vertical, mode: WbipamMode::Full, scaled: false }
    }
}

/// A (P, k, C) stack of k×1 strips plus what is needed to undo the partition.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowStack {
    pub data: TensorMap,
    pub origin: [usize; 4],
    pub k: usize,
    pub axis: Axis,
}

impl WindowStack {
    pub fn strips(&self) -> usize {
        self.data.shape()[0]
    }
}

/// Number of strips for a (B, H, W, C) map: B·(H/k)·(W/k)·k.
pub fn strip_count(dims: [usize; 4], k: usize) -> usize {
    dims[0] * (dims[1] / k) * (dims[2] / k) * k
}

fn check_divisible(dims: [usize; 4], k: usize) -> Result<()> {
    if k == 0 || dims[1] % k != 0 || dims[2] % k != 0 {
        return Err(Error::shape(format!(
            "window size {k} must divide feature extents {}x{}",
            dims[1], dims[2]
        )));
    }
    Ok(())
}

/// `merge[j]` is the stack position holding map element `j`.
fn merge_table(dims: [usize; 4], k: usize, axis: Axis) -> Vec<usize> {
    let [b, h, w, c] = dims;
    let (nty, ntx) = (h / k, w / k);
    let mut idx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let (ty, tx, i, j) = (y / k, x / k, y % k, x % k);
                let (strip, elem) = match axis {
                    Axis::Vertical => (j, i),
                    Axis::Horizontal => (i, j),
                };
                let p = ((bi * nty + ty) * ntx + tx) * k + strip;
                for ch in 0..c {
                    idx.push((p * k + elem) * c + ch);
                }
            }
        }
    }
    idx
}

fn partition_table(dims: [usize; 4], k: usize, axis: Axis) -> Vec<usize> {
    let merge = merge_table(dims, k, axis);
    let mut part = vec![0; merge.len()];
    for (map_pos, &stack_pos) in merge.iter().enumerate() {
        part[stack_pos] = map_pos;
    }
    part
}

pub fn window_partition(x: &TensorMap, k: usize, axis: Axis) -> Result<WindowStack> {
    let dims = x.dims4()?;
    check_divisible(dims, k)?;
    let src = x.data();
    let data = partition_table(dims, k, axis).into_iter().map(|i| src[i]).collect();
    let p = strip_count(dims, k);
    Ok(WindowStack { data: TensorMap::new(vec![p, k, dims[3]], data)?, origin: dims, k, axis })
}

pub fn window_merge(w: &WindowStack) -> Result<TensorMap> {
    let dims = w.origin;
    check_divisible(dims, w.k)?;
    let expected = [strip_count(dims, w.k), w.k, dims[3]];
    if w.data.shape() != expected {
        return Err(Error::shape(format!(
            "window stack {:?} inconsistent with origin {dims:?} and k={} (expected {expected:?})",
            w.data.shape(),
            w.k
        )));
    }
    let src = w.data.data();
    let data = merge_table(dims, w.k, w.axis).into_iter().map(|i| src[i]).collect();
    TensorMap::new(dims.to_vec(), data)
}

/// Graph form of [`window_partition`]; the result has shape (P, k, 1, C) so it
/// can go straight into k×1 convolutions.
pub fn partition_var(ctx: &mut Ctx<'_>, x: Var, k: usize, axis: Axis) -> Result<Var> {
    let dims = ctx.g.value(x).dims4()?;
    check_divisible(dims, k)?;
    let table: Rc<[usize]> = partition_table(dims, k, axis).into();
    ctx.g.gather(x, table, vec![strip_count(dims, k), k, 1, dims[3]])
}

pub fn merge_var(ctx: &mut Ctx<'_>, stack: Var, dims: [usize; 4], k: usize, axis: Axis) -> Result<Var> {
    check_divisible(dims, k)?;
    let table: Rc<[usize]> = merge_table(dims, k, axis).into();
    ctx.g.gather(stack, table, dims.to_vec())
}

/// Declares the parameters of one WBiPAM block under `prefix`.
pub fn declare(specs: &mut SpecList, prefix: &str, channels: usize, proj: usize) {
    specs.conv_strip(&format!("{prefix}.res"), 3, channels, channels);
    specs.prelu(&format!("{prefix}.res_act"), channels);
    specs.push(format!("{prefix}.q.w"), vec![1, 1, channels, proj], crate::nn::Init::Kaiming { fan_in: channels });
    specs.push(format!("{prefix}.k.w"), vec![1, 1, channels, proj], crate::nn::Init::Kaiming { fan_in: channels });
    specs.conv(&format!("{prefix}.post"), 1, 2 * channels, channels, true);
}

/// Plain-tensor view of one block's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct WbipamParams {
    /// (1, 1, C, C′)
    pub w_q: TensorMap,
    /// (1, 1, C, C′)
    pub w_k: TensorMap,
    /// (3, 1, C, C) kernel and C biases of the residual strip convolution.
    pub res_kernel: TensorMap,
    pub res_bias: TensorMap,
    pub res_alpha: TensorMap,
    /// (1, 1, 2C, C) kernel and C biases applied after concatenation.
    pub post_kernel: TensorMap,
    pub post_bias: TensorMap,
}

impl WbipamParams {
    pub fn random(channels: usize, proj: usize, seed: u64) -> Result<Self> {
        if proj == 0 || channels == 0 {
            return Err(Error::config("WBiPAM needs C > 0 and C' > 0"));
        }
        let mut specs = SpecList::new();
        declare(&mut specs, "att", channels, proj);
        Self::from_params(&specs.materialize(seed), "att")
    }

    pub fn from_params(p: &ParamSet, prefix: &str) -> Result<Self> {
        let get = |n: &str| {
            let key = format!("{prefix}.{n}");
            p.get(&key).cloned().ok_or(Error::MissingParam(key))
        };
        Ok(Self {
            w_q: get("q.w")?,
            w_k: get("k.w")?,
            res_kernel: get("res.w")?,
            res_bias: get("res.b")?,
            res_alpha: get("res_act.alpha")?,
            post_kernel: get("post.w")?,
            post_bias: get("post.b")?,
        })
    }

    pub fn to_params(&self, prefix: &str) -> ParamSet {
        let mut p = ParamSet::new();
        for (n, t) in [
            ("q.w", &self.w_q),
            ("k.w", &self.w_k),
            ("res.w", &self.res_kernel),
            ("res.b", &self.res_bias),
            ("res_act.alpha", &self.res_alpha),
            ("post.w", &self.post_kernel),
            ("post.b", &self.post_bias),
        ] {
            p.insert(format!("{prefix}.{n}"), t.clone());
        }
        p
    }
}

/// Per-strip score matrices, each (P, k, k).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub a_lr: TensorMap,
    pub a_rl: TensorMap,
}

/// Graph handles produced by [`attention`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub left: Var,
    pub right: Var,
    pub attended_left: Var,
    pub attended_right: Var,
    pub a_lr: Var,
    pub a_rl: Var,
}

/// x + PReLU(conv3×1(x)) on a (P, k, 1, C) stack.
pub fn residual_var(ctx: &mut Ctx<'_>, x: Var, prefix: &str) -> Result<Var> {
    let h = ctx.conv(x, &format!("{prefix}.res"), 1, Padding::Same)?;
    let h = ctx.prelu(h, &format!("{prefix}.res_act"))?;
    ctx.g.add(x, h)
}

fn to3(ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
    let s = ctx.g.shape(x).to_vec();
    ctx.g.reshape(x, vec![s[0], s[1], s[3]])
}

fn to4(ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
    let s = ctx.g.shape(x).to_vec();
    ctx.g.reshape(x, vec![s[0], s[1], 1, s[2]])
}

/// Cross-attention between two (P, k, 1, C) stacks that already went through
/// the residual convolution.
///
/// Q = F_l·W_q, K = F_r·W_k, A_lr = softmax(Q·Kᵀ) over the key index, and the
/// attended features are A_lr·F_l and A_rlᵀ·F_r with A_rl = A_lrᵀ. Values are
/// taken from each branch's own features. Each branch is then concatenated with
/// its input and projected back to C channels by the shared `post` convolution.
pub fn attention(ctx: &mut Ctx<'_>, left: Var, right: Var, prefix: &str, scaled: bool) -> Result<AttentionVars> {
    if ctx.g.shape(left) != ctx.g.shape(right) {
        return Err(Error::shape(format!(
            "attention stacks differ: {:?} vs {:?}",
            ctx.g.shape(left),
            ctx.g.shape(right)
        )));
    }
    let [p, k, _, _] = ctx.g.value(left).dims4()?;
    let q = ctx.conv(left, &format!("{prefix}.q"), 1, Padding::Same)?;
    let kk = ctx.conv(right, &format!("{prefix}.k"), 1, Padding::Same)?;
    let (q, kk) = (to3(ctx, q)?, to3(ctx, kk)?);
    let mut scores = ctx.g.bmm(q, kk, true)?;
    if scaled {
        let proj = ctx.g.shape(q)[2] as f64;
        scores = ctx.g.scale(scores, 1.0 / proj.sqrt());
    }
    let a_lr = ctx.g.softmax_lastdim(scores);
    let a_rl = ctx.g.gather(a_lr, index::transpose_last2(p, k, k).into(), vec![p, k, k])?;

    let (l3, r3) = (to3(ctx, left)?, to3(ctx, right)?);
    let att_l = ctx.g.bmm(a_lr, l3, false)?;
    let att_r = ctx.g.bmm(a_rl, r3, false)?;
    let (att_l, att_r) = (to4(ctx, att_l)?, to4(ctx, att_r)?);

    let post = format!("{prefix}.post");
    let cat_l = ctx.g.concat(&[att_l, left])?;
    let out_l = ctx.conv(cat_l, &post, 1, Padding::Same)?;
    let cat_r = ctx.g.concat(&[att_r, right])?;
    let out_r = ctx.conv(cat_r, &post, 1, Padding::Same)?;
    Ok(AttentionVars { left: out_l, right: out_r, attended_left: att_l, attended_right: att_r, a_lr, a_rl })
}

/// Output of [`bipam_attention`] on plain stacks.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionResult {
    pub left: WindowStack,
    pub right: WindowStack,
    pub attended_left: TensorMap,
    pub attended_right: TensorMap,
    pub maps: AttentionMaps,
}

pub fn bipam_attention(left: &WindowStack, right: &WindowStack, p: &WbipamParams, scaled: bool) -> Result<AttentionResult> {
    if left.data.shape() != right.data.shape() || left.origin != right.origin || left.k != right.k {
        return Err(Error::shape(format!(
            "window stacks differ: {:?} (origin {:?}) vs {:?} (origin {:?})",
            left.data.shape(),
            left.origin,
            right.data.shape(),
            right.origin
        )));
    }
    let params = p.to_params("att");
    let mut ctx = Ctx::new(&params);
    let [pn, k, c] = <[usize; 3]>::try_from(left.data.shape()).map_err(|_| Error::shape("stack must be (P, k, C)"))?;
    let l = ctx.g.constant(left.data.clone().reshape(vec![pn, k, 1, c])?);
    let r = ctx.g.constant(right.data.clone().reshape(vec![pn, k, 1, c])?);
    let out = attention(&mut ctx, l, r, "att", scaled)?;
    let stack = |v: Var, base: &WindowStack| -> Result<WindowStack> {
        Ok(WindowStack { data: ctx.g.value(v).clone().reshape(vec![pn, k, c])?, ..base.clone() })
    };
    Ok(AttentionResult {
        left: stack(out.left, left)?,
        right: stack(out.right, right)?,
        attended_left: ctx.g.value(out.attended_left).clone().reshape(vec![pn, k, c])?,
        attended_right: ctx.g.value(out.attended_right).clone().reshape(vec![pn, k, c])?,
        maps: AttentionMaps { a_lr: ctx.g.value(out.a_lr).clone(), a_rl: ctx.g.value(out.a_rl).clone() },
    })
}

/// Window size actually used for a feature map under `cfg`.
pub fn effective_window(cfg: &WbipamConfig, dims: [usize; 4]) -> usize {
    match (cfg.mode, cfg.axis) {
        (WbipamMode::NoWindow, Axis::Vertical) => dims[1],
        (WbipamMode::NoWindow, Axis::Horizontal) => dims[2],
        _ => cfg.window,
    }
}

/// Full module on (B, H_f, W_f, C) maps: pad → partition → residual conv →
/// attention → concat + conv → merge → crop. Output shapes equal input shapes.
pub fn forward(ctx: &mut Ctx<'_>, left: Var, right: Var, prefix: &str, cfg: &WbipamConfig) -> Result<(Var, Var)> {
    if ctx.g.shape(left) != ctx.g.shape(right) {
        return Err(Error::shape(format!(
            "WBiPAM inputs differ: {:?} vs {:?}",
            ctx.g.shape(left),
            ctx.g.shape(right)
        )));
    }
    if cfg.mode == WbipamMode::Disabled {
        return Ok((left, right));
    }
    let dims = ctx.g.value(left).dims4()?;
    let k = effective_window(cfg, dims);
    if k == 0 {
        return Err(Error::config("window size must be at least 1"));
    }
    let (hp, wp) = (dims[1].next_multiple_of(k), dims[2].next_multiple_of(k));
    let padded = [dims[0], hp, wp, dims[3]];
    let pad = |ctx: &mut Ctx<'_>, x: Var| -> Result<Var> {
        if (hp, wp) == (dims[1], dims[2]) {
            Ok(x)
        } else {
            ctx.g.gather(x, index::pad_bottom_right(dims, hp, wp).into(), padded.to_vec())
        }
    };
    let crop = |ctx: &mut Ctx<'_>, x: Var| -> Result<Var> {
        if (hp, wp) == (dims[1], dims[2]) {
            Ok(x)
        } else {
            ctx.g.gather(x, index::crop_top_left(padded, dims[1], dims[2]).into(), dims.to_vec())
        }
    };

    let (l, r) = (pad(ctx, left)?, pad(ctx, right)?);
    let l = partition_var(ctx, l, k, cfg.axis)?;
    let r = partition_var(ctx, r, k, cfg.axis)?;
    let l = residual_var(ctx, l, prefix)?;
    let r = residual_var(ctx, r, prefix)?;
    let (out_l, out_r) = match cfg.mode {
        WbipamMode::Unidirectional => {
            // Right branch keeps only the residual path.
            let att = attention(ctx, l, r, prefix, cfg.scaled)?;
            (att.left, r)
        }
        _ => {
            let att = attention(ctx, l, r, prefix, cfg.scaled)?;
            (att.left, att.right)
        }
    };
    let out_l = merge_var(ctx, out_l, padded, k, cfg.axis)?;
    let out_r = merge_var(ctx, out_r, padded, k, cfg.axis)?;
    Ok((crop(ctx, out_l)?, crop(ctx, out_r)?))
}

/// Runs [`forward`] on plain tensors.
pub fn wbipam_forward(
    left: &TensorMap,
    right: &TensorMap,
    p: &WbipamParams,
    cfg: &WbipamConfig,
) -> Result<(TensorMap, TensorMap)> {
    let params = p.to_params("att");
    let mut ctx = Ctx::new(&params);
    let l = ctx.g.constant(left.clone());
    let r = ctx.g.constant(right.clone());
    let (ol, or) = forward(&mut ctx, l, r, "att", cfg)?;
    Ok((ctx.g.value(ol).clone(), ctx.g.value(or).clone()))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_tile_vertical_strips_are_columns() {
        let x = TensorMap::from_fn(vec![1, 4, 4, 1], |i| i as f64);
        let w = window_partition(&x, 4, Axis::Vertical).unwrap();
        assert_eq!(w.data.shape(), &[4, 4, 1]);
        for col in 0..4 {
            let strip: Vec<f64> = w.data.data()[col * 4..col * 4 + 4].to_vec();
            let expected: Vec<f64> = (0..4).map(|row| (row * 4 + col) as f64).collect();
            assert_eq!(strip, expected);
        }
        let h = window_partition(&x, 4, Axis::Horizontal).unwrap();
        assert_eq!(&h.data.data()[4..8], &[4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn strip_count_formula() {
        let x = TensorMap::zeros(vec![1, 4, 4, 1]);
        assert_eq!(window_partition(&x, 2, Axis::Vertical).unwrap().strips(), 8);
        assert_eq!(strip_count([3, 8, 16, 2], 4), 3 * 2 * 4 * 4);
    }

    #[test]
    fn partition_rejects_indivisible() {
        let x = TensorMap::zeros(vec![1, 6, 4, 1]);
        assert!(window_partition(&x, 4, Axis::Vertical).is_err());
    }

    #[test]
    fn merge_rejects_inconsistent_metadata() {
        let x = TensorMap::zeros(vec![1, 4, 4, 2]);
        let mut w = window_partition(&x, 2, Axis::Vertical).unwrap();
        w.origin = [1, 8, 4, 2];
        assert!(window_merge(&w).is_err());
    }

    #[test]
    fn round_trip_both_axes() {
        let mut r = rng(1);
        let x = TensorMap::randn(vec![2, 8, 8, 3], 1.0, &mut r);
        for k in [1, 2, 4, 8] {
            for axis in [Axis::Vertical, Axis::Horizontal] {
                let w = window_partition(&x, k, axis).unwrap();
                assert!(window_merge(&w).unwrap().bit_eq(&x));
            }
        }
    }

    #[test]
    fn merge_of_constant_stack_is_constant() {
        let w = WindowStack { data: TensorMap::full(vec![8, 2, 3], 4.5), origin: [1, 4, 4, 3], k: 2, axis: Axis::Horizontal };
        assert!(window_merge(&w).unwrap().data().iter().all(|&v| v == 4.5));
    }

    #[test]
    fn degenerate_window_attends_to_itself() {
        let mut r = rng(2);
        let x = TensorMap::randn(vec![1, 4, 4, 2], 1.0, &mut r);
        let y = TensorMap::randn(vec![1, 4, 4, 2], 1.0, &mut r);
        let (l, rr) = (window_partition(&x, 1, Axis::Vertical).unwrap(), window_partition(&y, 1, Axis::Vertical).unwrap());
        let p = WbipamParams::random(2, 2, 0).unwrap();
        let out = bipam_attention(&l, &rr, &p, false).unwrap();
        assert!(out.maps.a_lr.data().iter().all(|&v| v == 1.0));
        assert!(out.attended_left.bit_eq(&l.data));
    }

    #[test]
    fn zero_projections_give_window_means() {
        let mut r = rng(3);
        let x = TensorMap::randn(vec![1, 4, 4, 3], 1.0, &mut r);
        let y = TensorMap::randn(vec![1, 4, 4, 3], 1.0, &mut r);
        let k = 4;
        let (l, rr) = (window_partition(&x, k, Axis::Vertical).unwrap(), window_partition(&y, k, Axis::Vertical).unwrap());
        let mut p = WbipamParams::random(3, 2, 0).unwrap();
        p.w_q = TensorMap::zeros(vec![1, 1, 3, 2]);
        p.w_k = TensorMap::zeros(vec![1, 1, 3, 2]);
        let out = bipam_attention(&l, &rr, &p, false).unwrap();
        assert!(out.maps.a_lr.data().iter().all(|&v| v == 0.25));
        for strip in 0..l.strips() {
            for ch in 0..3 {
                let mean: f64 = (0..k).map(|i| l.data.data()[(strip * k + i) * 3 + ch]).sum::<f64>() / k as f64;
                for i in 0..k {
                    let got = out.attended_left.data()[(strip * k + i) * 3 + ch];
                    assert!((got - mean).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn disabled_mode_is_identity() {
        let mut r = rng(4);
        let x = TensorMap::randn(vec![1, 8, 8, 4], 1.0, &mut r);
        let y = TensorMap::randn(vec![1, 8, 8, 4], 1.0, &mut r);
        let p = WbipamParams::random(4, 4, 1).unwrap();
        let cfg = WbipamConfig { mode: WbipamMode::Disabled, ..Default::default() };
        let (a, b) = wbipam_forward(&x, &y, &p, &cfg).unwrap();
        assert!(a.bit_eq(&x) && b.bit_eq(&y));
    }

    #[test]
    fn every_mode_preserves_shape() {
        let mut r = rng(5);
        let x = TensorMap::randn(vec![1, 16, 16, 8], 1.0, &mut r);
        let y = TensorMap::randn(vec![1, 16, 16, 8], 1.0, &mut r);
        let p = WbipamParams::random(8, 8, 2).unwrap();
        for mode in [WbipamMode::Full, WbipamMode::NoWindow, WbipamMode::Unidirectional, WbipamMode::Disabled] {
            for axis in [Axis::Vertical, Axis::Horizontal] {
                let cfg = WbipamConfig { mode, axis, ..Default::default() };
                let (a, b) = wbipam_forward(&x, &y, &p, &cfg).unwrap();
                assert_eq!(a.shape(), x.shape());
                assert_eq!(b.shape(), y.shape());
                assert!(a.is_finite() && b.is_finite());
            }
        }
    }

    #[test]
    fn indivisible_extents_are_padded() {
        let mut r = rng(6);
        let x = TensorMap::randn(vec![1, 6, 10, 2], 1.0, &mut r);
        let y = TensorMap::randn(vec![1, 6, 10, 2], 1.0, &mut r);
        let p = WbipamParams::random(2, 2, 3).unwrap();
        let (a, _) = wbipam_forward(&x, &y, &p, &WbipamConfig { window: 4, ..Default::default() }).unwrap();
        assert_eq!(a.shape(), &[1, 6, 10, 2]);
    }
}
