//! Brute-force reference implementations shared by the integration tests.
//! They are written from the definitions, not from the library code.

#![allow(dead_code)]

use dpdepth::TensorMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random (h, w, 1) prediction, target and mask with roughly 80% valid pixels.
/// The mask keeps at least two valid pixels.
pub fn random_triplet(seed: u64, h: usize, w: usize) -> (TensorMap, TensorMap, TensorMap) {
    let mut r = rng(seed);
    let target = TensorMap::from_fn(vec![h, w, 1], |_| r.gen_range(0.0..1.0));
    let pred = TensorMap::from_fn(vec![h, w, 1], |i| 0.7 * target.data()[i] + 0.3 * r.gen_range(-1.0..1.0));
    let mut mask = TensorMap::from_fn(vec![h, w, 1], |_| if r.gen_bool(0.8) { 1.0 } else { 0.0 });
    mask.data_mut()[0] = 1.0;
    mask.data_mut()[h * w - 1] = 1.0;
    (pred, target, mask)
}

fn valid(pred: &TensorMap, target: &TensorMap, mask: &TensorMap) -> Vec<(f64, f64)> {
    (0..pred.len()).filter(|&i| mask.data()[i] > 0.0).map(|i| (pred.data()[i], target.data()[i])).collect()
}

/// Normal equations from raw sums, solved with Cramer's rule.
pub fn fit(pred: &TensorMap, target: &TensorMap, mask: &TensorMap) -> (f64, f64) {
    let v = valid(pred, target, mask);
    let n = v.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in &v {
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let det = n * sxx - sx * sx;
    let a = (n * sxy - sx * sy) / det;
    let b = (sxx * sy - sx * sxy) / det;
    (a, b)
}

pub fn residual_map(pred: &TensorMap, target: &TensorMap, mask: &TensorMap) -> Vec<f64> {
    let (a, b) = fit(pred, target, mask);
    (0..pred.len()).map(|i| if mask.data()[i] > 0.0 { a * pred.data()[i] + b - target.data()[i] } else { 0.0 }).collect()
}

pub fn si_mae(pred: &TensorMap, target: &TensorMap, mask: &TensorMap) -> f64 {
    let r = residual_map(pred, target, mask);
    let idx: Vec<usize> = (0..r.len()).filter(|&i| mask.data()[i] > 0.0).collect();
    idx.iter().map(|&i| r[i].abs()).sum::<f64>() / idx.len() as f64
}

pub fn aiwe2(pred: &TensorMap, target: &TensorMap, mask: &TensorMap) -> f64 {
    let r = residual_map(pred, target, mask);
    let idx: Vec<usize> = (0..r.len()).filter(|&i| mask.data()[i] > 0.0).collect();
    (idx.iter().map(|&i| r[i] * r[i]).sum::<f64>() / idx.len() as f64).sqrt()
}

/// Mean |forward difference| in x plus in y of the residual pooled by
/// 2^k, averaged over k. A pooled cell is valid only if its whole block is.
pub fn grad_matching(pred: &TensorMap, target: &TensorMap, mask: &TensorMap, scales: usize) -> f64 {
    let (h, w) = (pred.shape()[0], pred.shape()[1]);
    let r = residual_map(pred, target, mask);
    let mut total = 0.0;
    for k in 0..scales {
        let f = 1usize << k;
        let (ph, pw) = (h / f, w / f);
        let cell = |y: usize, x: usize| -> Option<f64> {
            let mut s = 0.0;
            for yy in y * f..(y + 1) * f {
                for xx in x * f..(x + 1) * f {
                    if mask.data()[yy * w + xx] <= 0.0 {
                        return None;
                    }
                    s += r[yy * w + xx];
                }
            }
            Some(s / (f * f) as f64)
        };
        let mut dx = Vec::new();
        let mut dy = Vec::new();
        for y in 0..ph {
            for x in 0..pw {
                if let Some(c) = cell(y, x) {
                    if x + 1 < pw {
                        if let Some(n) = cell(y, x + 1) {
                            dx.push((n - c).abs());
                        }
                    }
                    if y + 1 < ph {
                        if let Some(n) = cell(y + 1, x) {
                            dy.push((n - c).abs());
                        }
                    }
                }
            }
        }
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        total += mean(&dx) + mean(&dy);
    }
    total / scales as f64
}

/// Rank by counting: (#smaller) + (#equal + 1) / 2.
fn count_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let less = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn srcc(pred: &TensorMap, target: &TensorMap, mask: &TensorMap) -> f64 {
    let v = valid(pred, target, mask);
    let rp = count_ranks(&v.iter().map(|p| p.0).collect::<Vec<_>>());
    let rt = count_ranks(&v.iter().map(|p| p.1).collect::<Vec<_>>());
    let n = rp.len() as f64;
    let (mp, mt) = (rp.iter().sum::<f64>() / n, rt.iter().sum::<f64>() / n);
    let cov: f64 = rp.iter().zip(&rt).map(|(a, b)| (a - mp) * (b - mt)).sum();
    let vp: f64 = rp.iter().map(|a| (a - mp).powi(2)).sum();
    let vt: f64 = rt.iter().map(|b| (b - mt).powi(2)).sum();
    if vp == 0.0 || vt == 0.0 {
        0.0
    } else {
        cov / (vp * vt).sqrt()
    }
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}
