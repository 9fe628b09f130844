//! Synthetic RGB + dual-pixel + inverse-depth samples.
//!
//! Scenes are stacks of fronto-parallel textured rectangles over a distant
//! background. The DP views are the green channel warped by plus and minus
//! half the defocus disparity along the epipolar axis, where the disparity
//! grows linearly with distance from the focal plane in inverse depth.

pub mod dataset;
pub mod fmap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ModelInputs;
use crate::tensor::TensorMap;
use crate::wbipam::Axis;

pub use dataset::{
    make_dataset, read_manifest, read_sample, sample_dir_name, split_of, write_manifest, write_sample, Manifest,
    ManifestEntry, Split, MANIFEST_NAME,
};

/// Hard bound on the per-pixel shift between the two DP views.
pub const MAX_DISPARITY: f64 = 8.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub height: usize,
    pub width: usize,
    /// Inverse depth of the focal plane.
    pub focus: f64,
    /// Pixels of disparity per unit of inverse depth away from the focal plane.
    pub gain: f64,
    /// Clamp on |disparity|, at most [`MAX_DISPARITY`].
    pub max_disparity: f64,
    pub axis: Axis,
    /// Box-blur both views with a radius that grows with |disparity|.
    pub blur: bool,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { height: 64, width: 64, focus: 0.5, gain: 16.0, max_disparity: MAX_DISPARITY, axis: Axis::Vertical, blur: true, seed: 0 }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 64 != 0 || self.width % 64 != 0 {
            return Err(Error::config(format!("sample size {}x{} must be a non-zero multiple of 64", self.height, self.width)));
        }
        if !(0.0..=1.0).contains(&self.focus) {
            return Err(Error::config(format!("focus {} outside [0, 1]", self.focus)));
        }
        if !(self.gain.is_finite() && self.gain >= 0.0) {
            return Err(Error::config(format!("gain {} must be finite and >= 0", self.gain)));
        }
        if !(0.0..=MAX_DISPARITY).contains(&self.max_disparity) {
            return Err(Error::config(format!("max_disparity {} outside [0, {MAX_DISPARITY}]", self.max_disparity)));
        }
        Ok(())
    }
}

/// One aligned record. Every map is (H, W, C).
#[derive(Clone, Debug, PartialEq)]
pub struct RgbDpSample {
    pub rgb: TensorMap,
    pub dp_left: TensorMap,
    pub dp_right: TensorMap,
    /// Normalized inverse depth in [0, 1].
    pub invdepth: TensorMap,
    /// 1 where the ground truth is usable, 0 elsewhere.
    pub mask: TensorMap,
}

impl RgbDpSample {
    pub fn extent(&self) -> (usize, usize) {
        (self.rgb.shape()[0], self.rgb.shape()[1])
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w, c] = <[usize; 3]>::try_from(self.rgb.shape())
            .map_err(|_| Error::Data(format!("rgb map must be (H, W, 3), got {:?}", self.rgb.shape())))?;
        if c != 3 {
            return Err(Error::Data(format!("rgb map must have 3 channels, got {c}")));
        }
        for (name, t) in [("dp_left", &self.dp_left), ("dp_right", &self.dp_right), ("invdepth", &self.invdepth), ("mask", &self.mask)] {
            if t.shape() != [h, w, 1] {
                return Err(Error::Data(format!("{name} is {:?}, expected [{h}, {w}, 1]", t.shape())));
            }
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &RgbDpSample) -> bool {
        self.rgb.bit_eq(&other.rgb)
            && self.dp_left.bit_eq(&other.dp_left)
            && self.dp_right.bit_eq(&other.dp_right)
            && self.invdepth.bit_eq(&other.invdepth)
            && self.mask.bit_eq(&other.mask)
    }
}

/// Samples stacked into network inputs plus loss targets, all (B, H, W, C).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: ModelInputs,
    pub target: TensorMap,
    pub mask: TensorMap,
}

impl Batch {
    pub fn from_samples(samples: &[&RgbDpSample]) -> Result<Self> {
        let stack = |f: fn(&RgbDpSample) -> &TensorMap| -> Result<TensorMap> {
            let items = samples
                .iter()
                .map(|s| {
                    let t = f(s);
                    let mut shape = vec![1];
                    shape.extend_from_slice(t.shape());
                    t.clone().reshape(shape)
                })
                .collect::<Result<Vec<_>>>()?;
            TensorMap::stack_batch(&items)
        };
        Ok(Self {
            inputs: ModelInputs { rgb: stack(|s| &s.rgb)?, dp_left: stack(|s| &s.dp_left)?, dp_right: stack(|s| &s.dp_right)? },
            target: stack(|s| &s.invdepth)?,
            mask: stack(|s| &s.mask)?,
        })
    }

    pub fn len(&self) -> usize {
        self.target.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A textured rectangle covering rows `y0..y1` and columns `x0..x1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
    pub invdepth: f64,
}

impl Layer {
    pub fn covers(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// (H, W, 3)
    pub rgb: TensorMap,
    /// (H, W, 1)
    pub invdepth: TensorMap,
    /// Far to near, i.e. in drawing order.
    pub layers: Vec<Layer>,
}

/// Smoothly interpolated lattice noise in [0, 1].
struct ValueNoise {
    cell: usize,
    cols: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(h: usize, w: usize, cell: usize, rng: &mut impl Rng) -> Self {
        let rows = h / cell + 2;
        let cols = w / cell + 2;
        Self { cell, cols, lattice: (0..rows * cols).map(|_| rng.gen::<f64>()).collect() }
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        let (gy, gx) = (y / self.cell, x / self.cell);
        let s = |v: f64| v * v * (3.0 - 2.0 * v);
        let fy = s((y % self.cell) as f64 / self.cell as f64);
        let fx = s((x % self.cell) as f64 / self.cell as f64);
        let l = |r: usize, c: usize| self.lattice[r * self.cols + c];
        let top = l(gy, gx) + fx * (l(gy, gx + 1) - l(gy, gx));
        let bottom = l(gy + 1, gx) + fx * (l(gy + 1, gx + 1) - l(gy + 1, gx));
        top + fy * (bottom - top)
    }
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)]
}

/// Deterministic layered scene. Background inverse depth lies in [0, 0.15];
/// between 3 and 8 layers get inverse depths in [0.2, 1] and are drawn far to
/// near, so nearer layers occlude farther ones. About a quarter of the layers
/// are flat-colored.
pub fn generate_scene(seed: u64, height: usize, width: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height, width);
    let mut rgb = vec![0.0; h * w * 3];
    let mut inv = vec![0.0; h * w];

    let (c0, c1) = (random_color(&mut rng), random_color(&mut rng));
    let (v_top, v_bottom) = (rng.gen_range(0.0..0.15), rng.gen_range(0.0..0.15));
    let noise = ValueNoise::new(h, w, 16, &mut rng);
    for y in 0..h {
        let t = y as f64 / (h - 1).max(1) as f64;
        for x in 0..w {
            let n = 0.7 + 0.3 * noise.at(y, x);
            for ch in 0..3 {
                rgb[(y * w + x) * 3 + ch] = (c0[ch] + t * (c1[ch] - c0[ch])) * n;
            }
            inv[y * w + x] = v_top + t * (v_bottom - v_top);
        }
    }

    let count = rng.gen_range(3..=8);
    let mut depths: Vec<f64> = (0..count).map(|_| rng.gen_range(0.2..=1.0)).collect();
    depths.sort_by(f64::total_cmp);
    let mut layers = Vec::with_capacity(count);
    for v in depths {
        let lh = rng.gen_range(h / 8..=h / 2);
        let lw = rng.gen_range(w / 8..=w / 2);
        let y0 = rng.gen_range(0..=h - lh);
        let x0 = rng.gen_range(0..=w - lw);
        let color = random_color(&mut rng);
        let flat = rng.gen_bool(0.25);
        let cell = [4, 8, 16][rng.gen_range(0..3)];
        let tex = ValueNoise::new(h, w, cell, &mut rng);
        for y in y0..y0 + lh {
            for x in x0..x0 + lw {
                let n = if flat { 1.0 } else { 0.4 + 0.6 * tex.at(y, x) };
                for ch in 0..3 {
                    rgb[(y * w + x) * 3 + ch] = color[ch] * n;
                }
                inv[y * w + x] = v;
            }
        }
        layers.push(Layer { y0, y1: y0 + lh, x0, x1: x0 + lw, invdepth: v });
    }

    Scene {
        rgb: TensorMap::new(vec![h, w, 3], rgb).expect("sized").quantize_f32(),
        invdepth: TensorMap::new(vec![h, w, 1], inv).expect("sized").quantize_f32(),
        layers,
    }
}

/// Signed disparity `clamp(gain · (v − focus), −max, max)` per pixel.
pub fn disparity_map(invdepth: &TensorMap, sc: &SimConfig) -> TensorMap {
    let m = sc.max_disparity.min(MAX_DISPARITY);
    invdepth.map(|v| (sc.gain * (v - sc.focus)).clamp(-m, m))
}

/// Samples `src` (an `n`-long line with stride `step`) at fractional `pos`;
/// `None` when `pos` is outside `[0, n − 1]`.
fn sample_line(src: &[f64], base: usize, step: usize, n: usize, pos: f64) -> Option<f64> {
    if !(pos >= 0.0 && pos <= (n - 1) as f64) {
        return None;
    }
    let i0 = pos.floor() as usize;
    let frac = pos - i0 as f64;
    let a = src[base + i0 * step];
    if frac == 0.0 {
        return Some(a);
    }
    let b = src[base + (i0 + 1) * step];
    Some(a + frac * (b - a))
}

fn edge_sample(src: &[f64], base: usize, step: usize, n: usize, pos: f64) -> f64 {
    let p = pos.clamp(0.0, (n - 1) as f64);
    sample_line(src, base, step, n, p).expect("clamped")
}

/// Warps a single-channel (H, W, 1) image by `+disparity/2` (left) and
/// `−disparity/2` (right) along `axis`, with linear interpolation. The mask is
/// 0 where either view samples outside the image; those pixels take the
/// nearest edge value.
pub fn warp_pair(gray: &TensorMap, disparity: &TensorMap, axis: Axis) -> Result<(TensorMap, TensorMap, TensorMap)> {
    let [h, w, c] = <[usize; 3]>::try_from(gray.shape()).map_err(|_| Error::shape("warp_pair needs an (H, W, 1) image"))?;
    if c != 1 || disparity.shape() != gray.shape() {
        return Err(Error::shape(format!("image {:?} and disparity {:?} must be matching (H, W, 1) maps", gray.shape(), disparity.shape())));
    }
    let src = gray.data();
    let mut l = vec![0.0; h * w];
    let mut r = vec![0.0; h * w];
    let mut m = vec![1.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let d = disparity.data()[i];
            let (base, step, n, at) = match axis {
                Axis::Vertical => (x, w, h, y as f64),
                Axis::Horizontal => (y * w, 1, w, x as f64),
            };
            let (pl, pr) = (at + d / 2.0, at + -d / 2.0);
            match (sample_line(src, base, step, n, pl), sample_line(src, base, step, n, pr)) {
                (Some(a), Some(b)) => {
                    l[i] = a;
                    r[i] = b;
                }
                _ => {
                    l[i] = edge_sample(src, base, step, n, pl);
                    r[i] = edge_sample(src, base, step, n, pr);
                    m[i] = 0.0;
                }
            }
        }
    }
    let mk = |v| TensorMap::new(vec![h, w, 1], v).expect("sized");
    Ok((mk(l), mk(r), mk(m)))
}

/// Box blur with a per-pixel radius, clipped at the borders.
pub fn variable_box_blur(img: &TensorMap, radius: &[usize]) -> TensorMap {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let src = img.data();
    // Summed-area table with a zero row and column in front.
    let mut sat = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += src[y * w + x];
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let data = (0..h * w)
        .map(|i| {
            let r = radius[i];
            if r == 0 {
                return src[i];
            }
            let (y, x) = (i / w, i % w);
            let (ya, yb) = (y.saturating_sub(r), (y + r + 1).min(h));
            let (xa, xb) = (x.saturating_sub(r), (x + r + 1).min(w));
            let s = sat[yb * (w + 1) + xb] - sat[ya * (w + 1) + xb] - sat[yb * (w + 1) + xa] + sat[ya * (w + 1) + xa];
            s / ((yb - ya) * (xb - xa)) as f64
        })
        .collect();
    TensorMap::new(img.shape().to_vec(), data).expect("same shape")
}

/// Blur radius for a disparity magnitude: 0 below 2 px, up to 2 at 8 px.
pub fn blur_radius(disparity: f64) -> usize {
    (disparity.abs() / 4.0).floor() as usize
}

/// Left view, right view and validity mask for an (H, W, 3) image and its
/// (H, W, 1) inverse depth. The gray source is the green channel.
pub fn render_dp(rgb: &TensorMap, invdepth: &TensorMap, sc: &SimConfig) -> Result<(TensorMap, TensorMap, TensorMap)> {
    let [h, w, c] = <[usize; 3]>::try_from(rgb.shape()).map_err(|_| Error::shape("render_dp needs an (H, W, 3) image"))?;
    if c != 3 || invdepth.shape() != [h, w, 1] {
        return Err(Error::shape(format!("rgb {:?} and inverse depth {:?} do not match", rgb.shape(), invdepth.shape())));
    }
    let gray = TensorMap::new(vec![h, w, 1], rgb.data().chunks_exact(3).map(|p| p[1]).collect())?;
    let disp = disparity_map(invdepth, sc);
    let (mut l, mut r, m) = warp_pair(&gray, &disp, sc.axis)?;
    if sc.blur {
        let radius: Vec<usize> = disp.data().iter().map(|&d| blur_radius(d)).collect();
        l = variable_box_blur(&l, &radius);
        r = variable_box_blur(&r, &radius);
    }
    Ok((l.quantize_f32(), r.quantize_f32(), m))
}

/// Scene plus DP rendering for one seed.
pub fn generate_sample(seed: u64, sc: &SimConfig) -> Result<RgbDpSample> {
    sc.validate()?;
    let scene = generate_scene(seed, sc.height, sc.width);
    let (dp_left, dp_right, mask) = render_dp(&scene.rgb, &scene.invdepth, sc)?;
    Ok(RgbDpSample { rgb: scene.rgb, dp_left, dp_right, invdepth: scene.invdepth, mask })
}
