//! Building blocks on top of [`Graph`], plus plain-tensor entry points for
//! one-off evaluation.

use super::graph::{Graph, Var};
use super::kernels::{self, ConvGeom, Padding, Taps};
use super::params::Ctx;
use crate::error::{Error, Result};
use crate::tensor::TensorMap;

/// Weights of one convolution: kernel (kh, kw, Cin, Cout) and Cout biases.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub kernel: TensorMap,
    pub bias: TensorMap,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvParams {
    pub fn zeros(k: usize, cin: usize, cout: usize, stride: usize, padding: Padding) -> Self {
        Self {
            kernel: TensorMap::zeros(vec![k, k, cin, cout]),
            bias: TensorMap::zeros(vec![cout]),
            stride,
            padding,
        }
    }
}

pub fn conv2d(x: &TensorMap, p: &ConvParams) -> Result<TensorMap> {
    let geom = ConvGeom::new(x.dims4()?, p.kernel.dims4()?, p.stride, p.padding, false)?;
    if p.bias.shape() != [geom.cout] {
        return Err(Error::shape(format!("conv bias {:?} does not match kernel {:?}", p.bias.shape(), p.kernel.shape())));
    }
    let out = kernels::conv2d_forward(x.data(), p.kernel.data(), Some(p.bias.data()), &geom);
    TensorMap::new(geom.out_shape().to_vec(), out)
}

pub fn softmax_lastdim(x: &TensorMap) -> TensorMap {
    let data = kernels::softmax_rows(x.data(), x.channels());
    TensorMap::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn prelu(x: &TensorMap, alpha: &[f64]) -> Result<TensorMap> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let a = g.constant(TensorMap::new(vec![alpha.len()], alpha.to_vec())?);
    let y = g.prelu(xv, a)?;
    Ok(g.value(y).clone())
}

pub fn resize_bilinear(x: &TensorMap, h2: usize, w2: usize) -> Result<TensorMap> {
    let dims = x.dims4()?;
    if h2 == 0 || w2 == 0 {
        return Err(Error::shape(format!("resize target {h2}x{w2} must be non-empty")));
    }
    let data = kernels::resize_forward(x.data(), dims, &Taps::new(dims[1], h2), &Taps::new(dims[2], w2));
    TensorMap::new(vec![dims[0], h2, w2, dims[3]], data)
}

/// Expand (1×1) → PReLU → depthwise 3×3 at `stride` → PReLU → project (1×1),
/// with an identity skip when the block preserves shape.
#[derive(Clone, Debug, PartialEq)]
pub struct InvertedResidualParams {
    pub expand: ConvParams,
    pub expand_alpha: TensorMap,
    pub depthwise: ConvParams,
    pub depthwise_alpha: TensorMap,
    pub project: ConvParams,
}

impl InvertedResidualParams {
    /// All-zero convolutions; PReLU slopes at 0.25.
    pub fn zeros(cin: usize, cout: usize, expansion: usize, stride: usize) -> Self {
        let hidden = cin * expansion;
        Self {
            expand: ConvParams::zeros(1, cin, hidden, 1, Padding::Same),
            expand_alpha: TensorMap::full(vec![hidden], 0.25),
            depthwise: ConvParams {
                kernel: TensorMap::zeros(vec![3, 3, 1, hidden]),
                bias: TensorMap::zeros(vec![hidden]),
                stride,
                padding: Padding::Same,
            },
            depthwise_alpha: TensorMap::full(vec![hidden], 0.25),
            project: ConvParams::zeros(1, hidden, cout, 1, Padding::Same),
        }
    }
}

/// Graph handles for the tensors of one inverted-residual block.
#[derive(Clone, Copy, Debug)]
pub struct InvertedResidualVars {
    pub expand: (Var, Var),
    pub expand_alpha: Var,
    pub depthwise: (Var, Var),
    pub depthwise_alpha: Var,
    pub project: (Var, Var),
}

impl InvertedResidualVars {
    pub fn bind(g: &mut Graph, p: &InvertedResidualParams, trainable: bool) -> Self {
        let mut leaf = |t: &TensorMap| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        Self {
            expand: (leaf(&p.expand.kernel), leaf(&p.expand.bias)),
            expand_alpha: leaf(&p.expand_alpha),
            depthwise: (leaf(&p.depthwise.kernel), leaf(&p.depthwise.bias)),
            depthwise_alpha: leaf(&p.depthwise_alpha),
            project: (leaf(&p.project.kernel), leaf(&p.project.bias)),
        }
    }

    pub fn from_ctx(ctx: &mut Ctx<'_>, name: &str) -> Result<Self> {
        Ok(Self {
            expand: (ctx.p(&format!("{name}.expand.w"))?, ctx.p(&format!("{name}.expand.b"))?),
            expand_alpha: ctx.p(&format!("{name}.expand_act.alpha"))?,
            depthwise: (ctx.p(&format!("{name}.dw.w"))?, ctx.p(&format!("{name}.dw.b"))?),
            depthwise_alpha: ctx.p(&format!("{name}.dw_act.alpha"))?,
            project: (ctx.p(&format!("{name}.project.w"))?, ctx.p(&format!("{name}.project.b"))?),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, stride: usize) -> Result<Var> {
        let h = g.conv2d(x, self.expand.0, Some(self.expand.1), 1, Padding::Same)?;
        let h = g.prelu(h, self.expand_alpha)?;
        let h = g.depthwise_conv2d(h, self.depthwise.0, Some(self.depthwise.1), stride, Padding::Same)?;
        let h = g.prelu(h, self.depthwise_alpha)?;
        let y = g.conv2d(h, self.project.0, Some(self.project.1), 1, Padding::Same)?;
        if stride == 1 && g.shape(x) == g.shape(y) {
            g.add(x, y)
        } else {
            Ok(y)
        }
    }
}

pub fn inverted_residual(x: &TensorMap, p: &InvertedResidualParams, stride: usize) -> Result<TensorMap> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars = InvertedResidualVars::bind(&mut g, p, false);
    let y = vars.forward(&mut g, xv, stride)?;
    Ok(g.value(y).clone())
}

/// Named-parameter conveniences used by the model code.
impl Ctx<'_> {
    /// Convolution with `name.w` and, when present, `name.b`.
    pub fn conv(&mut self, x: Var, name: &str, stride: usize, padding: Padding) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b_name = format!("{name}.b");
        let b = if self.has(&b_name) { Some(self.p(&b_name)?) } else { None };
        self.g.conv2d(x, w, b, stride, padding)
    }

    pub fn prelu(&mut self, x: Var, name: &str) -> Result<Var> {
        let a = self.p(&format!("{name}.alpha"))?;
        self.g.prelu(x, a)
    }

    pub fn inverted_residual(&mut self, x: Var, name: &str, stride: usize) -> Result<Var> {
        let vars = InvertedResidualVars::from_ctx(self, name)?;
        vars.forward(&mut self.g, x, stride)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Six nested loops, written without reference to the im2col path.
    fn naive_conv(x: &TensorMap, p: &ConvParams) -> TensorMap {
        let [b, h, w, cin] = x.dims4().unwrap();
        let [kh, kw, _, cout] = p.kernel.dims4().unwrap();
        let s = p.stride;
        let (ho, wo, pt, pl) = match p.padding {
            Padding::Valid => ((h - kh) / s + 1, (w - kw) / s + 1, 0i64, 0i64),
            Padding::Same => {
                let ho = h.div_ceil(s);
                let wo = w.div_ceil(s);
                let ph = ((ho - 1) * s + kh).saturating_sub(h) / 2;
                let pw = ((wo - 1) * s + kw).saturating_sub(w) / 2;
                (ho, wo, ph as i64, pw as i64)
            }
        };
        let mut out = TensorMap::zeros(vec![b, ho, wo, cout]);
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    for co in 0..cout {
                        let mut acc = p.bias.data()[co];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * s + ky) as i64 - pt;
                                let ix = (ox * s + kx) as i64 - pl;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                for ci in 0..cin {
                                    let xv = x.data()[((bi * h + iy as usize) * w + ix as usize) * cin + ci];
                                    let kv = p.kernel.data()[((ky * kw + kx) * cin + ci) * cout + co];
                                    acc += xv * kv;
                                }
                            }
                        }
                        out.data_mut()[((bi * ho + oy) * wo + ox) * cout + co] = acc;
                    }
                }
            }
        }
        out
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    #[test]
    fn conv_identity_kernel() {
        let x = TensorMap::from_fn(vec![1, 3, 3, 1], |i| i as f64 - 4.0);
        let mut p = ConvParams::zeros(1, 1, 1, 1, Padding::Same);
        p.kernel.data_mut()[0] = 1.0;
        assert!(conv2d(&x, &p).unwrap().bit_eq(&x));
    }

    #[test]
    fn conv_constant_field_valid() {
        let x = TensorMap::full(vec![1, 4, 4, 1], 1.0);
        let p = ConvParams {
            kernel: TensorMap::full(vec![3, 3, 1, 1], 1.0),
            bias: TensorMap::zeros(vec![1]),
            stride: 1,
            padding: Padding::Valid,
        };
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 1]);
        assert_eq!(y.data(), &[9.0; 4]);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut r = rng();
        let x = TensorMap::randn(vec![2, 8, 8, 3], 1.0, &mut r);
        for (k, stride, padding) in [(3, 1, Padding::Same), (3, 2, Padding::Same), (5, 1, Padding::Valid), (1, 1, Padding::Same), (3, 2, Padding::Valid)] {
            let p = ConvParams {
                kernel: TensorMap::randn(vec![k, k, 3, 4], 1.0, &mut r),
                bias: TensorMap::randn(vec![4], 1.0, &mut r),
                stride,
                padding,
            };
            let fast = conv2d(&x, &p).unwrap();
            let slow = naive_conv(&x, &p);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) <= 1e-12, "k={k} s={stride} {padding:?}");
        }
    }

    #[test]
    fn conv_same_output_extent_is_ceil() {
        let x = TensorMap::zeros(vec![1, 7, 5, 2]);
        let p = ConvParams::zeros(3, 2, 3, 2, Padding::Same);
        assert_eq!(conv2d(&x, &p).unwrap().shape(), &[1, 4, 3, 3]);
    }

    #[test]
    fn conv_rejects_channel_mismatch_naming_both_shapes() {
        let x = TensorMap::zeros(vec![1, 4, 4, 2]);
        let p = ConvParams::zeros(3, 3, 1, 1, Padding::Same);
        let msg = conv2d(&x, &p).unwrap_err().to_string();
        assert!(msg.contains("[1, 4, 4, 2]") && msg.contains("[3, 3, 3, 1]"), "{msg}");
    }

    #[test]
    fn conv_is_linear_without_bias() {
        let mut r = rng();
        let p = ConvParams {
            kernel: TensorMap::randn(vec![3, 3, 2, 3], 1.0, &mut r),
            bias: TensorMap::zeros(vec![3]),
            stride: 1,
            padding: Padding::Same,
        };
        let x = TensorMap::randn(vec![1, 6, 6, 2], 1.0, &mut r);
        let y = TensorMap::randn(vec![1, 6, 6, 2], 1.0, &mut r);
        let (a, b) = (0.7, -1.3);
        let mix = TensorMap::from_fn(vec![1, 6, 6, 2], |i| a * x.data()[i] + b * y.data()[i]);
        let lhs = conv2d(&mix, &p).unwrap();
        let (cx, cy) = (conv2d(&x, &p).unwrap(), conv2d(&y, &p).unwrap());
        let rhs = TensorMap::from_fn(lhs.shape().to_vec(), |i| a * cx.data()[i] + b * cy.data()[i]);
        let scale = rhs.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(lhs.max_abs_diff(&rhs) <= 1e-10 * scale);
    }

    #[test]
    fn softmax_examples() {
        let u = softmax_lastdim(&TensorMap::zeros(vec![3]));
        for v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let t = softmax_lastdim(&TensorMap::new(vec![2], vec![0.0, 2f64.ln()]).unwrap());
        assert!((t.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((t.data()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let t = softmax_lastdim(&TensorMap::new(vec![3], vec![1000.0, 1000.0, -1000.0]).unwrap());
        assert!(t.is_finite());
        assert!((t.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn prelu_examples() {
        let x = TensorMap::new(vec![2, 1], vec![5.0, -2.0]).unwrap();
        assert_eq!(prelu(&x, &[0.25]).unwrap().data(), &[5.0, -0.5]);
        assert!(prelu(&x, &[0.25, 0.5]).is_err());
    }

    #[test]
    fn resize_constant_and_round_trip() {
        let x = TensorMap::full(vec![1, 4, 4, 2], 7.0);
        let up = resize_bilinear(&x, 8, 8).unwrap();
        assert!(up.data().iter().all(|&v| v == 7.0));
        let down = resize_bilinear(&up, 3, 5).unwrap();
        assert!(resize_bilinear(&down, 4, 4).unwrap().bit_eq(&x));
    }

    #[test]
    fn resize_matches_direct_interpolation() {
        let x = TensorMap::new(vec![1, 2, 2, 1], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let up = resize_bilinear(&x, 4, 4).unwrap();
        // Direct evaluation of the align-corners-false source coordinate.
        let sample = |o: usize| -> f64 {
            let pos = ((o as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
            pos // values are 0 at column 0 and 1 at column 1
        };
        for col in 0..4 {
            let mean: f64 = (0..4).map(|row| up.data()[row * 4 + col]).sum::<f64>() / 4.0;
            assert!((mean - sample(col)).abs() < 1e-15);
        }
        let means: Vec<f64> = (0..4).map(|c| (0..4).map(|r| up.data()[r * 4 + c]).sum::<f64>() / 4.0).collect();
        assert_eq!(means, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn inverted_residual_zero_weights_is_skip() {
        let mut r = rng();
        let x = TensorMap::randn(vec![1, 6, 6, 4], 1.0, &mut r);
        let p = InvertedResidualParams::zeros(4, 4, 3, 1);
        assert!(inverted_residual(&x, &p, 1).unwrap().bit_eq(&x));
    }

    #[test]
    fn inverted_residual_stride_two_shape() {
        let x = TensorMap::zeros(vec![1, 8, 8, 4]);
        let p = InvertedResidualParams::zeros(4, 6, 2, 2);
        assert_eq!(inverted_residual(&x, &p, 2).unwrap().shape(), &[1, 4, 4, 6]);
    }
}
