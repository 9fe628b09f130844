//! Raw forward/backward kernels on flat NHWC buffers. The graph in
//! [`super::graph`] owns shape checking and dispatches here.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    Same,
    Valid,
}

/// Output geometry of a 2-D convolution over an NHWC input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    /// `kernel` is (kh, kw, Cin, Cout). For depthwise kernels pass Cin = 1 and
    /// set `depthwise`, in which case Cout must equal the input channels.
    pub fn new(
        x: [usize; 4],
        kernel: [usize; 4],
        stride: usize,
        padding: Padding,
        depthwise: bool,
    ) -> Result<Self> {
        let [batch, h, w, cin] = x;
        let [kh, kw, kcin, cout] = kernel;
        let mismatch = || {
            Error::shape(format!("conv input {x:?} incompatible with kernel {kernel:?}"))
        };
        if depthwise {
            if kcin != 1 || cout != cin {
                return Err(mismatch());
            }
        } else if kcin != cin {
            return Err(mismatch());
        }
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::shape(format!("degenerate conv: kernel {kernel:?}, stride {stride}")));
        }
        let (ho, wo, pad_top, pad_left) = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::shape(format!("'same' padding needs odd kernel extents, got {kernel:?}")));
                }
                let ho = h.div_ceil(stride);
                let wo = w.div_ceil(stride);
                let pad_h = ((ho - 1) * stride + kh).saturating_sub(h);
                let pad_w = ((wo - 1) * stride + kw).saturating_sub(w);
                (ho, wo, pad_h / 2, pad_w / 2)
            }
            Padding::Valid => {
                if h < kh || w < kw {
                    return Err(mismatch());
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
        };
        Ok(Self { batch, h, w, cin, kh, kw, cout, stride, ho, wo, pad_top, pad_left })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.ho, self.wo, self.cout]
    }

    fn rows(&self) -> usize {
        self.batch * self.ho * self.wo
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    /// Input coordinate for output `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(pad).filter(|&i| i < extent)
    }
}

/// C = op(A)·op(B) + beta·C, row-major. `a` is (m×k) or, transposed, stored (k×m).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the bounds asserted on entry.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(),
            n as isize, 1,
        );
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut cols = vec![0.0; g.rows() * patch];
    let mut row = 0;
    for b in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.pad_top, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.pad_left, g.w) else { continue };
                        let s = ((b * g.h + iy) * g.w + ix) * g.cin;
                        let d = (ky * g.kw + kx) * g.cin;
                        dst[d..d + g.cin].copy_from_slice(&x[s..s + g.cin]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut x = vec![0.0; g.batch * g.h * g.w * g.cin];
    let mut row = 0;
    for b in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let src = &cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.pad_top, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.pad_left, g.w) else { continue };
                        let d = ((b * g.h + iy) * g.w + ix) * g.cin;
                        let s = (ky * g.kw + kx) * g.cin;
                        for (xv, cv) in x[d..d + g.cin].iter_mut().zip(&src[s..s + g.cin]) {
                            *xv += cv;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    x
}

pub fn conv2d_forward(x: &[f64], kernel: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let rows = g.rows();
    let mut out = vec![0.0; rows * g.cout];
    if let Some(bias) = bias {
        for r in out.chunks_exact_mut(g.cout) {
            r.copy_from_slice(bias);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    if g.is_pointwise() {
        gemm(rows, g.cin, g.cout, x, false, kernel, false, beta, &mut out);
    } else {
        let cols = im2col(x, g);
        gemm(rows, g.patch(), g.cout, &cols, false, kernel, false, beta, &mut out);
    }
    out
}

pub struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dkernel: Option<Vec<f64>>,
    pub dbias: Option<Vec<f64>>,
}

pub fn conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    need: [bool; 3],
) -> ConvGrads {
    let rows = g.rows();
    let patch = g.patch();
    let [need_dx, need_dk, need_db] = need;
    let dbias = need_db.then(|| {
        let mut db = vec![0.0; g.cout];
        for r in dy.chunks_exact(g.cout) {
            for (acc, v) in db.iter_mut().zip(r) {
                *acc += v;
            }
        }
        db
    });
    let owned_cols;
    let cols: &[f64] = if g.is_pointwise() {
        x
    } else if need_dk {
        owned_cols = im2col(x, g);
        &owned_cols
    } else {
        &[]
    };
    let dkernel = need_dk.then(|| {
        let mut dk = vec![0.0; patch * g.cout];
        gemm(patch, rows, g.cout, cols, true, dy, false, 0.0, &mut dk);
        dk
    });
    let dx = need_dx.then(|| {
        let mut dcols = vec![0.0; rows * patch];
        gemm(rows, g.cout, patch, dy, false, kernel, true, 0.0, &mut dcols);
        if g.is_pointwise() {
            dcols
        } else {
            col2im(&dcols, g)
        }
    });
    ConvGrads { dx, dkernel, dbias }
}

pub fn depthwise_forward(x: &[f64], kernel: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let c = g.cin;
    let mut out = vec![0.0; g.rows() * c];
    let mut row = 0;
    for b in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let o = &mut out[row * c..(row + 1) * c];
                if let Some(bias) = bias {
                    o.copy_from_slice(bias);
                }
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.pad_top, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.pad_left, g.w) else { continue };
                        let xs = &x[((b * g.h + iy) * g.w + ix) * c..][..c];
                        let ks = &kernel[(ky * g.kw + kx) * c..][..c];
                        for ((ov, xv), kv) in o.iter_mut().zip(xs).zip(ks) {
                            *ov += xv * kv;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    out
}

pub fn depthwise_backward(
    x: &[f64],
    kernel: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    need: [bool; 3],
) -> ConvGrads {
    let c = g.cin;
    let [need_dx, need_dk, need_db] = need;
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut dk = need_dk.then(|| vec![0.0; kernel.len()]);
    let mut db = need_db.then(|| vec![0.0; c]);
    let mut row = 0;
    for b in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let d = &dy[row * c..(row + 1) * c];
                if let Some(db) = db.as_mut() {
                    for (acc, v) in db.iter_mut().zip(d) {
                        *acc += v;
                    }
                }
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.pad_top, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.pad_left, g.w) else { continue };
                        let xo = ((b * g.h + iy) * g.w + ix) * c;
                        let ko = (ky * g.kw + kx) * c;
                        if let Some(dx) = dx.as_mut() {
                            for ch in 0..c {
                                dx[xo + ch] += d[ch] * kernel[ko + ch];
                            }
                        }
                        if let Some(dk) = dk.as_mut() {
                            for ch in 0..c {
                                dk[ko + ch] += d[ch] * x[xo + ch];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
    ConvGrads { dx, dkernel: dk, dbias: db }
}

/// One-axis linear interpolation taps under the align-corners-false convention.
#[derive(Clone, Debug, PartialEq)]
pub struct Taps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl Taps {
    pub fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut t = Taps { lo: Vec::with_capacity(dst), hi: Vec::with_capacity(dst), frac: Vec::with_capacity(dst) };
        for o in 0..dst {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if lo == hi { 0.0 } else { pos - lo as f64 };
            t.lo.push(lo);
            t.hi.push(hi);
            t.frac.push(frac);
        }
        t
    }
}

/// Bilinear resize of an NHWC buffer. Interpolation is written as
/// `a + f·(b − a)` so constant fields are reproduced exactly.
pub fn resize_forward(x: &[f64], dims: [usize; 4], ty: &Taps, tx: &Taps) -> Vec<f64> {
    let [batch, h, w, c] = dims;
    let (h2, w2) = (ty.lo.len(), tx.lo.len());
    let mut out = vec![0.0; batch * h2 * w2 * c];
    let at = |b: usize, y: usize, xx: usize| ((b * h + y) * w + xx) * c;
    for b in 0..batch {
        for oy in 0..h2 {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..w2 {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let o = ((b * h2 + oy) * w2 + ox) * c;
                let (p00, p01, p10, p11) = (at(b, y0, x0), at(b, y0, x1), at(b, y1, x0), at(b, y1, x1));
                for ch in 0..c {
                    let top = x[p00 + ch] + fx * (x[p01 + ch] - x[p00 + ch]);
                    let bot = x[p10 + ch] + fx * (x[p11 + ch] - x[p10 + ch]);
                    out[o + ch] = top + fy * (bot - top);
                }
            }
        }
    }
    out
}

pub fn resize_backward(dy: &[f64], dims: [usize; 4], ty: &Taps, tx: &Taps) -> Vec<f64> {
    let [batch, h, w, c] = dims;
    let (h2, w2) = (ty.lo.len(), tx.lo.len());
    let mut dx = vec![0.0; batch * h * w * c];
    let at = |b: usize, y: usize, xx: usize| ((b * h + y) * w + xx) * c;
    for b in 0..batch {
        for oy in 0..h2 {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..w2 {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let o = ((b * h2 + oy) * w2 + ox) * c;
                let weights = [
                    (at(b, y0, x0), (1.0 - fx) * (1.0 - fy)),
                    (at(b, y0, x1), fx * (1.0 - fy)),
                    (at(b, y1, x0), (1.0 - fx) * fy),
                    (at(b, y1, x1), fx * fy),
                ];
                for (p, wgt) in weights {
                    for ch in 0..c {
                        dx[p + ch] += wgt * dy[o + ch];
                    }
                }
            }
        }
    }
    dx
}

/// Row-wise softmax over contiguous slices of length `n`, max-subtracted.
pub fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

pub fn softmax_rows_backward(y: &[f64], dy: &[f64], n: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((ys, ds), out) in y.chunks_exact(n).zip(dy.chunks_exact(n)).zip(dx.chunks_exact_mut(n)) {
        let dot: f64 = ys.iter().zip(ds).map(|(a, b)| a * b).sum();
        for ((o, &yv), &dv) in out.iter_mut().zip(ys).zip(ds) {
            *o = yv * (dv - dot);
        }
    }
    dx
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Batched `A·B` (or `A·Bᵀ`) over a leading batch axis.
pub fn bmm(a: &[f64], b: &[f64], batch: usize, m: usize, n: usize, q: usize, b_trans: bool) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * q];
    for p in 0..batch {
        gemm(
            m, n, q,
            &a[p * m * n..(p + 1) * m * n], false,
            &b[p * n * q..(p + 1) * n * q], b_trans,
            0.0, &mut out[p * m * q..(p + 1) * m * q],
        );
    }
    out
}
