//! Affine-invariant training loss on inverse depth.
//!
//! Every term first aligns the prediction to the target with a least-squares
//! scale and shift fitted over valid pixels, then measures the residual. Pixels
//! whose mask is not positive are skipped outright, never multiplied by zero,
//! so their values (even NaN) cannot leak into any result.

use crate::error::{Error, Result};
use crate::nn::{Graph, Var};
use crate::tensor::TensorMap;

/// Scale and shift mapping a prediction onto its target: `a·pred + b ≈ target`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineFit {
    pub a: f64,
    pub b: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the gradient-matching term.
    pub lambda: f64,
    /// Number of gradient-matching scales.
    pub scales: usize,
    /// Per-output weights, final map first. `None` averages all outputs equally.
    pub weights: Option<Vec<f64>>,
    /// Align with `|a|` instead of `a` in the training loss, so a prediction
    /// ordered opposite to the target is penalized instead of flipped.
    pub keep_orientation: bool,
    /// Training steps over which the gradient-matching weight rises linearly
    /// from 0 to `lambda`; 0 applies the full weight from the start.
    pub lambda_ramp: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 30.0, scales: 4, weights: None, keep_orientation: true, lambda_ramp: 200 }
    }
}

impl LossConfig {
    /// The configuration in effect at training step `step`.
    pub fn at_step(&self, step: u64) -> LossConfig {
        let mut lc = self.clone();
        if step < self.lambda_ramp {
            lc.lambda = self.lambda * step as f64 / self.lambda_ramp as f64;
        }
        lc
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.scales == 0 {
            return Err(Error::config("gradient scales must be >= 1"));
        }
        if let Some(w) = &self.weights {
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::config("deep-supervision weights must be non-negative with a positive sum"));
            }
        }
        Ok(())
    }
}

/// Height and width of a single-channel map stored as (H, W), (H, W, 1) or (1, H, W, 1).
pub fn map_extent(t: &TensorMap) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] | [h, w, 1] | [1, h, w, 1] => Ok((h, w)),
        ref s => Err(Error::shape(format!("expected a single-channel map, got {s:?}"))),
    }
}

fn check_triplet(pred: &TensorMap, target: &TensorMap, mask: &TensorMap) -> Result<(usize, usize)> {
    if pred.shape() != target.shape() || pred.shape() != mask.shape() {
        return Err(Error::shape(format!(
            "prediction {:?}, target {:?} and mask {:?} must match",
            pred.shape(),
            target.shape(),
            mask.shape()
        )));
    }
    map_extent(pred)
}

#[derive(Clone, Copy, Debug)]
struct Moments {
    n: f64,
    pred_mean: f64,
    target_mean: f64,
    /// Population variance of the prediction over valid pixels.
    var: f64,
    fit: AffineFit,
    degenerate: bool,
}

fn moments(p: &[f64], t: &[f64], m: &[f64]) -> Result<Moments> {
    let mut n = 0usize;
    let (mut sp, mut st) = (0.0, 0.0);
    for i in 0..p.len() {
        if m[i] > 0.0 {
            n += 1;
            sp += p[i];
            st += t[i];
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let nf = n as f64;
    let (pm, tm) = (sp / nf, st / nf);
    let (mut vpp, mut vpt) = (0.0, 0.0);
    for i in 0..p.len() {
        if m[i] > 0.0 {
            let dp = p[i] - pm;
            vpp += dp * dp;
            vpt += dp * (t[i] - tm);
        }
    }
    let (var, cov) = (vpp / nf, vpt / nf);
    let degenerate = !(var > 1e-20 * (1.0 + pm * pm));
    let fit = if degenerate {
        AffineFit { a: 0.0, b: tm }
    } else {
        let a = cov / var;
        AffineFit { a, b: tm - a * pm }
    };
    if !(fit.a.is_finite() && fit.b.is_finite()) {
        return Err(Error::Numerical(format!("affine fit is not finite: {fit:?}")));
    }
    Ok(Moments { n: nf, pred_mean: pm, target_mean: tm, var, fit, degenerate })
}

/// Least-squares scale and shift minimizing Σ_valid (a·pred + b − target)².
/// A (numerically) constant prediction yields `a = 0, b = mean(target)`.
pub fn affine_align(pred: &TensorMap, target: &TensorMap, mask: &TensorMap) -> Result<AffineFit> {
    check_triplet(pred, target, mask)?;
    Ok(moments(pred.data(), target.data(), mask.data())?.fit)
}

fn residual(p: &[f64], t: &[f64], m: &[f64], fit: AffineFit) -> Vec<f64> {
    (0..p.len()).map(|i| if m[i] > 0.0 { fit.a * p[i] + fit.b - t[i] } else { 0.0 }).collect()
}

/// Mean absolute residual after alignment.
pub fn si_mae(pred: &TensorMap, target: &TensorMap, mask: &TensorMap) -> Result<f64> {
    check_triplet(pred, target, mask)?;
    let (p, t, m) = (pred.data(), target.data(), mask.data());
    let mo = moments(p, t, m)?;
    let r = residual(p, t, m, mo.fit);
    Ok(masked_sum(&r, m, f64::abs) / mo.n)
}

fn masked_sum(r: &[f64], m: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    r.iter().zip(m).filter(|(_, &mv)| mv > 0.0).map(|(&v, _)| f(v)).sum()
}

/// Average-pools a (h, w) map by `factor` (trailing rows and columns dropped)
/// and combines masks with logical AND.
pub fn pool_map(values: &[f64], mask: &[f64], h: usize, w: usize, factor: usize) -> (Vec<f64>, Vec<f64>, usize, usize) {
    let (ph, pw) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut v = vec![0.0; ph * pw];
    let mut mk = vec![0.0; ph * pw];
    for y in 0..ph {
        for x in 0..pw {
            let mut all = true;
            let mut s = 0.0;
            for dy in 0..factor {
                for dx in 0..factor {
                    let i = (y * factor + dy) * w + x * factor + dx;
                    if mask[i] > 0.0 {
                        s += values[i];
                    } else {
                        all = false;
                    }
                }
            }
            if all {
                v[y * pw + x] = s * inv;
                mk[y * pw + x] = 1.0;
            }
        }
    }
    (v, mk, ph, pw)
}

/// Per-scale gradient-matching terms of a residual map:
/// `mean|∂x R_k| + mean|∂y R_k|` over valid forward-difference pairs of the
/// residual pooled by 2^k. A scale without any valid pair contributes 0.
pub fn gradient_terms(residual: &[f64], mask: &[f64], h: usize, w: usize, scales: usize) -> Vec<f64> {
    (0..scales)
        .map(|k| {
            let (r, m, ph, pw) = pool_map(residual, mask, h, w, 1 << k);
            let (sx, nx, sy, ny) = diff_sums(&r, &m, ph, pw);
            mean_or_zero(sx, nx) + mean_or_zero(sy, ny)
        })
        .collect()
}

fn mean_or_zero(s: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn diff_sums(r: &[f64], m: &[f64], h: usize, w: usize) -> (f64, usize, f64, usize) {
    let (mut sx, mut nx, mut sy, mut ny) = (0.0, 0, 0.0, 0);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if m[i] <= 0.0 {
                continue;
            }
            if x + 1 < w && m[i + 1] > 0.0 {
                sx += (r[i + 1] - r[i]).abs();
                nx += 1;
            }
            if y + 1 < h && m[i + w] > 0.0 {
                sy += (r[i + w] - r[i]).abs();
                ny += 1;
            }
        }
    }
    (sx, nx, sy, ny)
}

/// Multi-scale gradient matching of the aligned residual, averaged over scales.
pub fn grad_matching(pred: &TensorMap, target: &TensorMap, mask: &TensorMap, scales: usize) -> Result<f64> {
    if scales == 0 {
        return Err(Error::config("gradient scales must be >= 1"));
    }
    let (h, w) = check_triplet(pred, target, mask)?;
    let (p, t, m) = (pred.data(), target.data(), mask.data());
    let mo = moments(p, t, m)?;
    let r = residual(p, t, m, mo.fit);
    Ok(gradient_terms(&r, m, h, w, scales).iter().sum::<f64>() / scales as f64)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// d(gradient term)/dR, accumulated into `out` with weight `scale`.
fn gradient_terms_backward(r: &[f64], m: &[f64], h: usize, w: usize, scales: usize, weight: f64, out: &mut [f64]) {
    for k in 0..scales {
        let f = 1usize << k;
        let (rk, mk, ph, pw) = pool_map(r, m, h, w, f);
        let (_, nx, _, ny) = diff_sums(&rk, &mk, ph, pw);
        let mut g = vec![0.0; ph * pw];
        for y in 0..ph {
            for x in 0..pw {
                let i = y * pw + x;
                if mk[i] <= 0.0 {
                    continue;
                }
                if x + 1 < pw && mk[i + 1] > 0.0 {
                    let s = sign(rk[i + 1] - rk[i]) / nx as f64;
                    g[i + 1] += s;
                    g[i] -= s;
                }
                if y + 1 < ph && mk[i + pw] > 0.0 {
                    let s = sign(rk[i + pw] - rk[i]) / ny as f64;
                    g[i + pw] += s;
                    g[i] -= s;
                }
            }
        }
        let spread = weight / (f * f) as f64;
        for y in 0..ph {
            for x in 0..pw {
                let gi = g[y * pw + x];
                if gi == 0.0 {
                    continue;
                }
                for dy in 0..f {
                    for dx in 0..f {
                        out[(y * f + dy) * w + x * f + dx] += gi * spread;
                    }
                }
            }
        }
    }
}

/// Value and prediction-gradient of `si_mae + λ·grad_matching` on one map.
fn scale_loss(p: &[f64], t: &[f64], m: &[f64], h: usize, w: usize, lc: &LossConfig) -> Result<(f64, Vec<f64>)> {
    let mut mo = moments(p, t, m)?;
    // With a = s·cov/var, s = sign(a) flips back a reversed fit.
    let s = if lc.keep_orientation && mo.fit.a < 0.0 { -1.0 } else { 1.0 };
    if s < 0.0 {
        let a = -mo.fit.a;
        mo.fit = AffineFit { a, b: mo.target_mean - a * mo.pred_mean };
    }
    let r = residual(p, t, m, mo.fit);
    let mae = masked_sum(&r, m, f64::abs) / mo.n;
    let terms = gradient_terms(&r, m, h, w, lc.scales);
    let value = mae + lc.lambda * terms.iter().sum::<f64>() / lc.scales as f64;

    // dL/dR on valid pixels.
    let mut g_r: Vec<f64> = (0..r.len()).map(|i| if m[i] > 0.0 { sign(r[i]) / mo.n } else { 0.0 }).collect();
    if lc.lambda > 0.0 {
        gradient_terms_backward(&r, m, h, w, lc.scales, lc.lambda / lc.scales as f64, &mut g_r);
    }

    // R_j = a·p_j + b − t_j with (a, b) themselves functions of p.
    let AffineFit { a, .. } = mo.fit;
    let mut grad = vec![0.0; p.len()];
    if mo.degenerate {
        return Ok((value, grad));
    }
    let (mut sum_g, mut sum_gp) = (0.0, 0.0);
    for i in 0..p.len() {
        if m[i] > 0.0 {
            sum_g += g_r[i];
            sum_gp += g_r[i] * p[i];
        }
    }
    let denom = mo.n * mo.var;
    for i in 0..p.len() {
        if m[i] > 0.0 {
            let da = (s * (t[i] - mo.target_mean) - 2.0 * a * (p[i] - mo.pred_mean)) / denom;
            let db = -mo.pred_mean * da - a / mo.n;
            grad[i] = a * g_r[i] + sum_gp * da + sum_g * db;
        }
    }
    Ok((value, grad))
}

/// `si_mae + λ·grad_matching` on a single map.
pub fn scale_loss_value(pred: &TensorMap, target: &TensorMap, mask: &TensorMap, lc: &LossConfig) -> Result<f64> {
    let (h, w) = check_triplet(pred, target, mask)?;
    Ok(scale_loss(pred.data(), target.data(), mask.data(), h, w, lc)?.0)
}

/// Pools a batched (B, H, W, 1) target and mask down to (B, h, w, 1).
pub fn pool_target(target: &TensorMap, mask: &TensorMap, h: usize, w: usize) -> Result<(TensorMap, TensorMap)> {
    let [b, th, tw, c] = target.dims4()?;
    if c != 1 || mask.shape() != target.shape() {
        return Err(Error::shape(format!("target {:?} and mask {:?} must be matching single-channel maps", target.shape(), mask.shape())));
    }
    if h == 0 || th % h != 0 || tw % w != 0 || th / h != tw / w {
        return Err(Error::shape(format!("cannot pool {th}x{tw} to {h}x{w} by a single integer factor")));
    }
    let f = th / h;
    let (mut tv, mut mv) = (Vec::with_capacity(b * h * w), Vec::with_capacity(b * h * w));
    for bi in 0..b {
        let s = bi * th * tw..(bi + 1) * th * tw;
        let (v, m, _, _) = pool_map(&target.data()[s.clone()], &mask.data()[s], th, tw, f);
        tv.extend(v);
        mv.extend(m);
    }
    Ok((TensorMap::new(vec![b, h, w, 1], tv)?, TensorMap::new(vec![b, h, w, 1], mv)?))
}

fn output_weights(lc: &LossConfig, outputs: usize) -> Result<Vec<f64>> {
    match &lc.weights {
        None => Ok(vec![1.0 / outputs as f64; outputs]),
        Some(w) if w.len() == outputs => {
            let s: f64 = w.iter().sum();
            Ok(w.iter().map(|v| v / s).collect())
        }
        Some(w) => Err(Error::config(format!("{} deep-supervision weights for {outputs} outputs", w.len()))),
    }
}

/// Loss of one batched output against a (pooled) target, averaged over the
/// batch, with its gradient. `required` turns an empty mask into an error;
/// otherwise an empty sample contributes 0.
fn batched_loss(pred: &TensorMap, target: &TensorMap, mask: &TensorMap, lc: &LossConfig, required: bool) -> Result<(f64, TensorMap)> {
    let [b, h, w, c] = pred.dims4()?;
    if c != 1 || pred.shape() != target.shape() {
        return Err(Error::shape(format!("output {:?} does not match target {:?}", pred.shape(), target.shape())));
    }
    let hw = h * w;
    let mut grad = vec![0.0; pred.len()];
    let mut total = 0.0;
    for bi in 0..b {
        let s = bi * hw..(bi + 1) * hw;
        match scale_loss(&pred.data()[s.clone()], &target.data()[s.clone()], &mask.data()[s.clone()], h, w, lc) {
            Ok((v, g)) => {
                total += v / b as f64;
                for (o, gi) in grad[s].iter_mut().zip(g) {
                    *o = gi / b as f64;
                }
            }
            Err(Error::EmptyMask) if !required => {}
            Err(e) => return Err(e),
        }
    }
    Ok((total, TensorMap::new(pred.shape().to_vec(), grad)?))
}

/// Deep-supervised loss as a graph node: the final map is compared against the
/// full-resolution target, every intermediate against the target pooled to its
/// size. Outputs are (B, h, w, 1).
pub fn total_loss_var(
    g: &mut Graph,
    final_map: Var,
    intermediates: &[Var],
    target: &TensorMap,
    mask: &TensorMap,
    lc: &LossConfig,
) -> Result<Var> {
    lc.validate()?;
    let weights = output_weights(lc, 1 + intermediates.len())?;
    if g.shape(final_map) != target.shape() {
        return Err(Error::shape(format!("final map {:?} vs target {:?}", g.shape(final_map), target.shape())));
    }
    let (v, grad) = batched_loss(g.value(final_map), target, mask, lc, true)?;
    let mut terms = vec![g.scalar_fn(&[final_map], v, vec![grad])?];
    for &out in intermediates {
        let [_, h, w, _] = g.value(out).dims4()?;
        let (t, m) = pool_target(target, mask, h, w)?;
        let (v, grad) = batched_loss(g.value(out), &t, &m, lc, false)?;
        terms.push(g.scalar_fn(&[out], v, vec![grad])?);
    }
    g.weighted_sum(&terms, &weights)
}

/// Plain-tensor form of [`total_loss_var`].
pub fn total_loss(final_map: &TensorMap, intermediates: &[TensorMap], target: &TensorMap, mask: &TensorMap, lc: &LossConfig) -> Result<f64> {
    let mut g = Graph::new();
    let f = g.constant(final_map.clone());
    let inter: Vec<Var> = intermediates.iter().map(|t| g.constant(t.clone())).collect();
    let root = total_loss_var(&mut g, f, &inter, target, mask, lc)?;
    Ok(g.value(root).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, v: &[f64]) -> TensorMap {
        TensorMap::new(vec![h, w, 1], v.to_vec()).unwrap()
    }

    #[test]
    fn identity_and_inverse_affine() {
        let t = map(2, 3, &[0.1, 0.5, 0.2, 0.9, 0.3, 0.7]);
        let m = TensorMap::full(vec![2, 3, 1], 1.0);
        let fit = affine_align(&t, &t, &m).unwrap();
        assert!((fit.a - 1.0).abs() < 1e-12 && fit.b.abs() < 1e-12);
        let p = t.map(|v| 2.0 * v + 3.0);
        let fit = affine_align(&p, &t, &m).unwrap();
        assert!((fit.a - 0.5).abs() < 1e-12 && (fit.b + 1.5).abs() < 1e-12);
    }

    #[test]
    fn constant_prediction_is_degenerate() {
        let t = map(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let p = TensorMap::full(vec![2, 2, 1], 0.3);
        let m = TensorMap::full(vec![2, 2, 1], 1.0);
        assert_eq!(affine_align(&p, &t, &m).unwrap(), AffineFit { a: 0.0, b: 0.5 });
        assert_eq!(si_mae(&p, &t, &m).unwrap(), 0.5);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let z = TensorMap::zeros(vec![3, 3, 1]);
        assert!(matches!(si_mae(&z, &z, &z), Err(Error::EmptyMask)));
        assert!(matches!(grad_matching(&z, &z, &z, 4), Err(Error::EmptyMask)));
    }

    #[test]
    fn ramp_residual_gives_its_slope() {
        let (h, w, s) = (8, 8, 0.37);
        let r: Vec<f64> = (0..h * w).map(|i| s * (i % w) as f64).collect();
        let terms = gradient_terms(&r, &vec![1.0; h * w], h, w, 1);
        assert!((terms[0] - s).abs() < 1e-12);
    }

    #[test]
    fn pooling_ands_masks() {
        let v = [1.0, 2.0, 3.0, 4.0];
        let (p, m, _, _) = pool_map(&v, &[1.0; 4], 2, 2, 2);
        assert_eq!((p[0], m[0]), (2.5, 1.0));
        let (p, m, _, _) = pool_map(&v, &[1.0, 1.0, 0.0, 1.0], 2, 2, 2);
        assert_eq!((p[0], m[0]), (0.0, 0.0));
    }

    #[test]
    fn lambda_zero_is_plain_mae() {
        let t = map(4, 4, &(0..16).map(|i| ((i * 7) % 5) as f64 / 4.0).collect::<Vec<_>>());
        let p = map(4, 4, &(0..16).map(|i| ((i * 3) % 7) as f64).collect::<Vec<_>>());
        let m = TensorMap::full(vec![4, 4, 1], 1.0);
        let lc = LossConfig { lambda: 0.0, keep_orientation: false, ..Default::default() };
        assert_eq!(scale_loss_value(&p, &t, &m, &lc).unwrap(), si_mae(&p, &t, &m).unwrap());
    }

    #[test]
    fn kept_orientation_penalizes_reversed_order() {
        let t = map(4, 4, &(0..16).map(|i| ((i * 7) % 5) as f64 / 4.0).collect::<Vec<_>>());
        let p = t.map(|v| 3.0 - 2.0 * v);
        let m = TensorMap::full(vec![4, 4, 1], 1.0);
        let free = LossConfig { keep_orientation: false, ..Default::default() };
        assert!(scale_loss_value(&p, &t, &m, &free).unwrap() < 1e-12);
        assert!(scale_loss_value(&p, &t, &m, &LossConfig::default()).unwrap() > 0.1);
        let q = t.map(|v| 3.0 + 2.0 * v);
        assert!(scale_loss_value(&q, &t, &m, &LossConfig::default()).unwrap() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { lambda: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { scales: 0, ..Default::default() }.validate().is_err());
    }
}
