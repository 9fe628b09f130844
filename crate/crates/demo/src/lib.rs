//! Browser bindings: render a synthetic dual-pixel pair, inspect the attention
//! inside one epipolar strip, and score an affinely distorted prediction.

use dpdepth::dpsim::{generate_scene, render_dp, SimConfig};
use dpdepth::loss::{total_loss, LossConfig};
use dpdepth::metrics::{aiwe, srcc};
use dpdepth::wbipam::{bipam_attention, window_partition, Axis, WbipamParams};
use dpdepth::{Result, TensorMap};
use wasm_bindgen::prelude::*;

/// Demo image size.
pub const SIZE: usize = 64;
/// Panels in [`render_panels`]: RGB, left view, right view, |left − right|, inverse depth.
pub const PANELS: usize = 5;

fn sim(focus: f64, gain: f64, blur: bool) -> SimConfig {
    SimConfig { focus, gain, blur, ..Default::default() }
}

fn views(seed: u32, focus: f64, gain: f64, blur: bool) -> Result<(TensorMap, TensorMap, TensorMap, TensorMap)> {
    let sc = sim(focus, gain, blur);
    sc.validate()?;
    let scene = generate_scene(seed as u64, SIZE, SIZE);
    let (l, r, _) = render_dp(&scene.rgb, &scene.invdepth, &sc)?;
    Ok((scene.rgb, l, r, scene.invdepth))
}

fn byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// RGBA pixels of the five panels side by side, (5·64) × 64.
pub fn render_panels(seed: u32, focus: f64, gain: f64, blur: bool) -> Result<Vec<u8>> {
    let (rgb, l, r, inv) = views(seed, focus, gain, blur)?;
    let width = SIZE * PANELS;
    let mut out = vec![255u8; width * SIZE * 4];
    for y in 0..SIZE {
        for x in 0..SIZE {
            let i = y * SIZE + x;
            let gray = |v: f64| [byte(v); 3];
            let px: [[u8; 3]; PANELS] = [
                [byte(rgb.data()[3 * i]), byte(rgb.data()[3 * i + 1]), byte(rgb.data()[3 * i + 2])],
                gray(l.data()[i]),
                gray(r.data()[i]),
                gray(4.0 * (l.data()[i] - r.data()[i]).abs()),
                gray(inv.data()[i]),
            ];
            for (p, c) in px.iter().enumerate() {
                let o = (y * width + p * SIZE + x) * 4;
                out[o..o + 3].copy_from_slice(c);
            }
        }
    }
    Ok(out)
}

/// Row-major k×k left-to-right attention of the vertical strip at column `x`
/// in tile row `tile`, with mean-removed intensities as one-channel features
/// and `sharpness` as both projection weights.
pub fn strip_attention(seed: u32, focus: f64, gain: f64, x: usize, tile: usize, k: usize, sharpness: f64) -> Result<Vec<f64>> {
    let (_, l, r, _) = views(seed, focus, gain, true)?;
    let center = |t: &TensorMap| {
        let m = t.sum() / t.len() as f64;
        t.map(|v| 4.0 * (v - m)).reshape(vec![1, SIZE, SIZE, 1])
    };
    let (l, r) = (center(&l)?, center(&r)?);
    let one = |v: f64| TensorMap::full(vec![1, 1, 1, 1], v);
    let params = WbipamParams {
        w_q: one(sharpness),
        w_k: one(sharpness),
        res_kernel: TensorMap::zeros(vec![3, 1, 1, 1]),
        res_bias: TensorMap::zeros(vec![1]),
        res_alpha: TensorMap::zeros(vec![1]),
        post_kernel: TensorMap::zeros(vec![1, 1, 2, 1]),
        post_bias: TensorMap::zeros(vec![1]),
    };
    let lw = window_partition(&l, k, Axis::Vertical)?;
    let rw = window_partition(&r, k, Axis::Vertical)?;
    let out = bipam_attention(&lw, &rw, &params, false)?;
    let tiles_per_row = SIZE / k;
    if x >= SIZE || tile >= SIZE / k {
        return Err(dpdepth::Error::config(format!("strip ({x}, {tile}) outside the {SIZE}x{SIZE} image")));
    }
    let strip = (tile * tiles_per_row + x / k) * k + x % k;
    Ok(out.maps.a_lr.data()[strip * k * k..(strip + 1) * k * k].to_vec())
}

/// Scores `scale · invdepth + shift + noise` (optionally depth-reversed)
/// against the true inverse depth: [1 − SRCC, AIWE1, AIWE2, loss, loss with a
/// free-sign fit].
pub fn score_distortion(seed: u32, scale: f64, shift: f64, noise: f64, reverse: bool) -> Result<Vec<f64>> {
    use rand::{Rng, SeedableRng};
    let inv = generate_scene(seed as u64, SIZE, SIZE).invdepth;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed as u64 ^ 0xd15c);
    let sign = if reverse { -1.0 } else { 1.0 };
    let pred = TensorMap::from_fn(vec![SIZE, SIZE, 1], |i| sign * scale * inv.data()[i] + shift + noise * rng.gen_range(-1.0..1.0));
    let mask = TensorMap::full(vec![SIZE, SIZE, 1], 1.0);
    let b = |t: &TensorMap| t.clone().reshape(vec![1, SIZE, SIZE, 1]);
    let kept = total_loss(&b(&pred)?, &[], &b(&inv)?, &b(&mask)?, &LossConfig::default())?;
    let free = total_loss(&b(&pred)?, &[], &b(&inv)?, &b(&mask)?, &LossConfig { keep_orientation: false, ..Default::default() })?;
    Ok(vec![1.0 - srcc(&pred, &inv, &mask)?, aiwe(&pred, &inv, &mask, 1)?, aiwe(&pred, &inv, &mask, 2)?, kept, free])
}

fn js(e: dpdepth::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn panels(seed: u32, focus: f64, gain: f64, blur: bool) -> std::result::Result<Vec<u8>, JsError> {
    render_panels(seed, focus, gain, blur).map_err(js)
}

#[wasm_bindgen]
pub fn attention(seed: u32, focus: f64, gain: f64, x: u32, tile: u32, k: u32, sharpness: f64) -> std::result::Result<Vec<f64>, JsError> {
    strip_attention(seed, focus, gain, x as usize, tile as usize, k as usize, sharpness).map_err(js)
}

#[wasm_bindgen]
pub fn score(seed: u32, scale: f64, shift: f64, noise: f64, reverse: bool) -> std::result::Result<Vec<f64>, JsError> {
    score_distortion(seed, scale, shift, noise, reverse).map_err(js)
}
