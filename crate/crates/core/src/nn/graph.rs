//! Reverse-mode differentiation over a flat node arena.
//!
//! Every operation evaluates eagerly and appends a node; [`Graph::backward`]
//! walks the arena in reverse. Nodes that do not depend on any differentiable
//! leaf are never visited.

use std::rc::Rc;

use super::kernels::{self, ConvGeom, Padding, Taps};
use crate::error::{Error, Result};
use crate::tensor::TensorMap;

/// Sentinel in gather indices meaning "write zero".
pub const ZERO: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { x: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom, depthwise: bool },
    Add(Var, Var),
    Mul { a: Var, b: Var },
    Prelu { x: Var, alpha: Var },
    Sigmoid(Var),
    Softmax(Var),
    Resize { x: Var, ty: Rc<Taps>, tx: Rc<Taps> },
    Concat(Vec<Var>),
    Gather { x: Var, index: Rc<[usize]> },
    Reshape(Var),
    Bmm { a: Var, b: Var, dims: [usize; 4], b_trans: bool },
    MeanHw(Var),
    WeightedSum { inputs: Vec<Var>, weights: Vec<f64> },
    /// Scalar output with precomputed local gradients, one per input.
    Scalar { inputs: Vec<Var>, local: Vec<TensorMap> },
}

struct Node {
    value: TensorMap,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by node; `None` for nodes that received no gradient.
pub struct Gradients(Vec<Option<TensorMap>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&TensorMap> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<TensorMap> {
        self.0.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<TensorMap>, shape: &[usize], delta: Vec<f64>) {
    match slot {
        Some(g) => {
            for (a, d) in g.data_mut().iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => *slot = Some(TensorMap::new(shape.to_vec(), delta).expect("gradient shape")),
    }
}

/// Per-dimension strides of `small` when broadcast against `big` (0 on broadcast axes).
fn broadcast_strides(big: &[usize], small: &[usize]) -> Result<Vec<usize>> {
    if big.len() != small.len() || big.iter().zip(small).any(|(&b, &s)| s != b && s != 1) {
        return Err(Error::shape(format!("cannot broadcast {small:?} against {big:?}")));
    }
    let mut strides = vec![0; small.len()];
    let mut acc = 1;
    for d in (0..small.len()).rev() {
        strides[d] = if small[d] == 1 { 0 } else { acc };
        acc *= small[d];
    }
    Ok(strides)
}

/// Maps each flat index of `big` to the flat index into the broadcast operand.
fn broadcast_index(big: &[usize], strides: &[usize]) -> Vec<usize> {
    let n: usize = big.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; big.len()];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for d in (0..big.len()).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < big[d] {
                break;
            }
            off -= strides[d] * big[d];
            idx[d] = 0;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &TensorMap {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant leaf; gradients are not propagated into it.
    pub fn constant(&mut self, value: TensorMap) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: TensorMap) -> Var {
        self.push(value, Op::Leaf, true)
    }

    fn push(&mut self, value: TensorMap, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        self.conv_impl(x, kernel, bias, stride, padding, false)
    }

    /// Per-channel convolution; `kernel` has shape (kh, kw, 1, C).
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        self.conv_impl(x, kernel, bias, stride, padding, true)
    }

    fn conv_impl(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: Padding, depthwise: bool) -> Result<Var> {
        let xs = self.value(x).dims4()?;
        let ks = self.value(kernel).dims4().map_err(|_| {
            Error::shape(format!("conv kernel must be rank 4, got {:?} (input {xs:?})", self.shape(kernel)))
        })?;
        let geom = ConvGeom::new(xs, ks, stride, padding, depthwise)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                return Err(Error::shape(format!(
                    "conv bias {:?} does not match kernel {ks:?}",
                    self.shape(b)
                )));
            }
        }
        let bias_data = bias.map(|b| self.value(b).data());
        let out = if depthwise {
            kernels::depthwise_forward(self.value(x).data(), self.value(kernel).data(), bias_data, &geom)
        } else {
            kernels::conv2d_forward(self.value(x).data(), self.value(kernel).data(), bias_data, &geom)
        };
        let mut deps = vec![x, kernel];
        deps.extend(bias);
        let tracked = self.tracked(&deps);
        let value = TensorMap::new(geom.out_shape().to_vec(), out)?;
        Ok(self.push(value, Op::Conv { x, kernel, bias, geom, depthwise }, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("add: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = TensorMap::new(self.shape(a).to_vec(), data)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    /// Elementwise product; `b` may broadcast along axes where its extent is 1.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let strides = broadcast_strides(self.shape(a), self.shape(b))?;
        let bidx = broadcast_index(self.shape(a), &strides);
        let bv = self.value(b).data();
        let data = self.value(a).data().iter().zip(&bidx).map(|(x, &i)| x * bv[i]).collect();
        let value = TensorMap::new(self.shape(a).to_vec(), data)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, tracked))
    }

    /// PReLU with one slope per channel (last axis).
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let c = self.value(x).channels();
        if self.shape(alpha) != [c] {
            return Err(Error::shape(format!("prelu slopes {:?} for input {:?}", self.shape(alpha), self.shape(x))));
        }
        let a = self.value(alpha).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(a).map(|(&v, &s)| if v >= 0.0 { v } else { s * v }))
            .collect();
        let value = TensorMap::new(self.shape(x).to_vec(), data)?;
        let tracked = self.tracked(&[x, alpha]);
        Ok(self.push(value, Op::Prelu { x, alpha }, tracked))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::sigmoid);
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Sigmoid(x), tracked)
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let n = self.value(x).channels();
        let data = kernels::softmax_rows(self.value(x).data(), n);
        let value = TensorMap::new(self.shape(x).to_vec(), data).expect("softmax shape");
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Softmax(x), tracked)
    }

    pub fn resize_bilinear(&mut self, x: Var, h2: usize, w2: usize) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        if h2 == 0 || w2 == 0 {
            return Err(Error::shape(format!("resize target {h2}x{w2} must be non-empty")));
        }
        let ty = Rc::new(Taps::new(dims[1], h2));
        let tx = Rc::new(Taps::new(dims[2], w2));
        let data = kernels::resize_forward(self.value(x).data(), dims, &ty, &tx);
        let value = TensorMap::new(vec![dims[0], h2, w2, dims[3]], data)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Resize { x, ty, tx }, tracked))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if &s[..s.len() - 1] != lead {
                return Err(Error::shape(format!("concat: {:?} vs {:?}", self.shape(first), s)));
            }
            total += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in inputs {
                let c = self.value(v).channels();
                data.extend_from_slice(&self.value(v).data()[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = TensorMap::new(shape, data)?;
        let tracked = self.tracked(inputs);
        Ok(self.push(value, Op::Concat(inputs.to_vec()), tracked))
    }

    /// `out[i] = x[index[i]]`, or 0 where `index[i] == ZERO`. Covers permutations,
    /// padding, cropping, slicing and transposes.
    pub fn gather(&mut self, x: Var, index: Rc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::shape(format!("gather: {} indices for shape {shape:?}", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i != ZERO && i >= src.len()) {
            return Err(Error::shape(format!("gather index {bad} out of range for {:?}", self.shape(x))));
        }
        let data = index.iter().map(|&i| if i == ZERO { 0.0 } else { src[i] }).collect();
        let value = TensorMap::new(shape, data)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Gather { x, index }, tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Reshape(x), tracked))
    }

    /// Batched product of (P, m, n) with (P, n, q), or with (P, q, n) transposed.
    pub fn bmm(&mut self, a: Var, b: Var, b_trans: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ([p, m, n], [pb, b1, b2]) = (
            <[usize; 3]>::try_from(sa.as_slice()).map_err(|_| Error::shape(format!("bmm lhs {sa:?} not rank 3")))?,
            <[usize; 3]>::try_from(sb.as_slice()).map_err(|_| Error::shape(format!("bmm rhs {sb:?} not rank 3")))?,
        );
        let (inner, q) = if b_trans { (b2, b1) } else { (b1, b2) };
        if p != pb || n != inner {
            return Err(Error::shape(format!("bmm: {sa:?} x {sb:?} (transposed: {b_trans})")));
        }
        let data = kernels::bmm(self.value(a).data(), self.value(b).data(), p, m, n, q, b_trans);
        let value = TensorMap::new(vec![p, m, q], data)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Bmm { a, b, dims: [p, m, n, q], b_trans }, tracked))
    }

    /// Spatial mean of a (B, H, W, C) map, giving (B, 1, 1, C).
    pub fn mean_hw(&mut self, x: Var) -> Result<Var> {
        let [b, h, w, c] = self.value(x).dims4()?;
        let src = self.value(x).data();
        let mut data = vec![0.0; b * c];
        for bi in 0..b {
            for px in 0..h * w {
                for ch in 0..c {
                    data[bi * c + ch] += src[(bi * h * w + px) * c + ch];
                }
            }
        }
        let inv = 1.0 / (h * w) as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        let value = TensorMap::new(vec![b, 1, 1, c], data)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::MeanHw(x), tracked))
    }

    /// Σ weights[i]·inputs[i] over same-shaped inputs.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: &[f64]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::shape("weighted_sum of nothing"))?;
        if inputs.len() != weights.len() {
            return Err(Error::shape("weighted_sum: inputs and weights differ in length"));
        }
        let shape = self.shape(first).to_vec();
        let mut data = vec![0.0; self.value(first).len()];
        for (&v, &wgt) in inputs.iter().zip(weights) {
            if self.shape(v) != shape {
                return Err(Error::shape(format!("weighted_sum: {shape:?} vs {:?}", self.shape(v))));
            }
            for (d, s) in data.iter_mut().zip(self.value(v).data()) {
                *d += wgt * s;
            }
        }
        let value = TensorMap::new(shape, data)?;
        let tracked = self.tracked(inputs);
        Ok(self.push(value, Op::WeightedSum { inputs: inputs.to_vec(), weights: weights.to_vec() }, tracked))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.weighted_sum(&[x], &[factor]).expect("single-input weighted sum")
    }

    /// Records an externally differentiated scalar function of `inputs`.
    pub fn scalar_fn(&mut self, inputs: &[Var], value: f64, local: Vec<TensorMap>) -> Result<Var> {
        if inputs.len() != local.len() {
            return Err(Error::shape("scalar_fn: one local gradient per input required"));
        }
        for (&v, g) in inputs.iter().zip(&local) {
            if self.shape(v) != g.shape() {
                return Err(Error::shape(format!("scalar_fn: gradient {:?} for input {:?}", g.shape(), self.shape(v))));
            }
        }
        let tracked = self.tracked(inputs);
        Ok(self.push(TensorMap::scalar(value), Op::Scalar { inputs: inputs.to_vec(), local }, tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let local = TensorMap::full(t.shape().to_vec(), 1.0);
        let value = t.sum();
        self.scalar_fn(&[x], value, vec![local]).expect("sum")
    }

    /// Gradients of the scalar `root` with respect to every tracked node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(format!("backward needs a scalar root, got {:?}", self.shape(root))));
        }
        let mut grads: Vec<Option<TensorMap>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(TensorMap::full(self.shape(root).to_vec(), 1.0));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.backward_node(node, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Ok(Gradients(grads))
    }

    fn backward_node(&self, node: &Node, dy: &TensorMap, grads: &mut [Option<TensorMap>]) {
        let want = |v: Var| self.nodes[v.0].tracked;
        let dyd = dy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, kernel, bias, geom, depthwise } => {
                let need = [want(*x), want(*kernel), bias.is_some_and(want)];
                let (xv, kv) = (self.value(*x).data(), self.value(*kernel).data());
                let g = if *depthwise {
                    kernels::depthwise_backward(xv, kv, dyd, geom, need)
                } else {
                    kernels::conv2d_backward(xv, kv, dyd, geom, need)
                };
                if let Some(dx) = g.dx {
                    accumulate(&mut grads[x.0], self.shape(*x), dx);
                }
                if let Some(dk) = g.dkernel {
                    accumulate(&mut grads[kernel.0], self.shape(*kernel), dk);
                }
                if let (Some(b), Some(db)) = (bias, g.dbias) {
                    accumulate(&mut grads[b.0], self.shape(*b), db);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if want(*v) {
                        accumulate(&mut grads[v.0], self.shape(*v), dyd.to_vec());
                    }
                }
            }
            Op::Mul { a, b } => {
                let strides = broadcast_strides(self.shape(*a), self.shape(*b)).expect("checked in forward");
                let bidx = broadcast_index(self.shape(*a), &strides);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if want(*a) {
                    let da = dyd.iter().zip(&bidx).map(|(d, &i)| d * bv[i]).collect();
                    accumulate(&mut grads[a.0], self.shape(*a), da);
                }
                if want(*b) {
                    let mut db = vec![0.0; bv.len()];
                    for ((d, x), &i) in dyd.iter().zip(av).zip(&bidx) {
                        db[i] += d * x;
                    }
                    accumulate(&mut grads[b.0], self.shape(*b), db);
                }
            }
            Op::Prelu { x, alpha } => {
                let xv = self.value(*x).data();
                let av = self.value(*alpha).data();
                let c = av.len();
                if want(*x) {
                    let dx = dyd
                        .iter()
                        .zip(xv)
                        .enumerate()
                        .map(|(i, (d, &v))| if v >= 0.0 { *d } else { d * av[i % c] })
                        .collect();
                    accumulate(&mut grads[x.0], self.shape(*x), dx);
                }
                if want(*alpha) {
                    let mut da = vec![0.0; c];
                    for (i, (d, &v)) in dyd.iter().zip(xv).enumerate() {
                        if v < 0.0 {
                            da[i % c] += d * v;
                        }
                    }
                    accumulate(&mut grads[alpha.0], self.shape(*alpha), da);
                }
            }
            Op::Sigmoid(x) => {
                let dx = dyd.iter().zip(node.value.data()).map(|(d, y)| d * y * (1.0 - y)).collect();
                accumulate(&mut grads[x.0], self.shape(*x), dx);
            }
            Op::Softmax(x) => {
                let dx = kernels::softmax_rows_backward(node.value.data(), dyd, node.value.channels());
                accumulate(&mut grads[x.0], self.shape(*x), dx);
            }
            Op::Resize { x, ty, tx } => {
                let dims = self.value(*x).dims4().expect("checked in forward");
                let dx = kernels::resize_backward(dyd, dims, ty, tx);
                accumulate(&mut grads[x.0], self.shape(*x), dx);
            }
            Op::Concat(inputs) => {
                let total = node.value.channels();
                let rows = node.value.len() / total;
                let mut offset = 0;
                for v in inputs {
                    let c = self.value(*v).channels();
                    if want(*v) {
                        let mut dx = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            dx.extend_from_slice(&dyd[r * total + offset..r * total + offset + c]);
                        }
                        accumulate(&mut grads[v.0], self.shape(*v), dx);
                    }
                    offset += c;
                }
            }
            Op::Gather { x, index } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (d, &i) in dyd.iter().zip(index.iter()) {
                    if i != ZERO {
                        dx[i] += d;
                    }
                }
                accumulate(&mut grads[x.0], self.shape(*x), dx);
            }
            Op::Reshape(x) => accumulate(&mut grads[x.0], self.shape(*x), dyd.to_vec()),
            Op::Bmm { a, b, dims: [p, m, n, q], b_trans } => {
                let (p, m, n, q) = (*p, *m, *n, *q);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if want(*a) {
                    // dA = dC · op(B)ᵀ
                    let mut da = vec![0.0; p * m * n];
                    for i in 0..p {
                        kernels::gemm(
                            m, q, n,
                            &dyd[i * m * q..(i + 1) * m * q], false,
                            &bv[i * n * q..(i + 1) * n * q], !*b_trans,
                            0.0, &mut da[i * m * n..(i + 1) * m * n],
                        );
                    }
                    accumulate(&mut grads[a.0], self.shape(*a), da);
                }
                if want(*b) {
                    let mut db = vec![0.0; p * n * q];
                    for i in 0..p {
                        let (ai, ci) = (&av[i * m * n..(i + 1) * m * n], &dyd[i * m * q..(i + 1) * m * q]);
                        let out = &mut db[i * n * q..(i + 1) * n * q];
                        if *b_trans {
                            // B is stored (q, n): dB = dCᵀ · A
                            kernels::gemm(q, m, n, ci, true, ai, false, 0.0, out);
                        } else {
                            kernels::gemm(n, m, q, ai, true, ci, false, 0.0, out);
                        }
                    }
                    accumulate(&mut grads[b.0], self.shape(*b), db);
                }
            }
            Op::MeanHw(x) => {
                let [b, h, w, c] = self.value(*x).dims4().expect("checked in forward");
                let inv = 1.0 / (h * w) as f64;
                let mut dx = vec![0.0; b * h * w * c];
                for bi in 0..b {
                    for px in 0..h * w {
                        for ch in 0..c {
                            dx[(bi * h * w + px) * c + ch] = dyd[bi * c + ch] * inv;
                        }
                    }
                }
                accumulate(&mut grads[x.0], self.shape(*x), dx);
            }
            Op::WeightedSum { inputs, weights } => {
                for (v, &wgt) in inputs.iter().zip(weights) {
                    if want(*v) {
                        accumulate(&mut grads[v.0], self.shape(*v), dyd.iter().map(|d| d * wgt).collect());
                    }
                }
            }
            Op::Scalar { inputs, local } => {
                let d = dyd[0];
                for (v, g) in inputs.iter().zip(local) {
                    if want(*v) {
                        accumulate(&mut grads[v.0], self.shape(*v), g.data().iter().map(|x| x * d).collect());
                    }
                }
            }
        }
    }
}

/// Index tables for common gather-based rearrangements of (B, H, W, C) maps.
pub mod index {
    use super::ZERO;

    /// Zero-pads H and W at the bottom/right edge up to (h2, w2).
    pub fn pad_bottom_right(dims: [usize; 4], h2: usize, w2: usize) -> Vec<usize> {
        let [b, h, w, c] = dims;
        let mut idx = Vec::with_capacity(b * h2 * w2 * c);
        for bi in 0..b {
            for y in 0..h2 {
                for x in 0..w2 {
                    for ch in 0..c {
                        idx.push(if y < h && x < w { ((bi * h + y) * w + x) * c + ch } else { ZERO });
                    }
                }
            }
        }
        idx
    }

    /// Keeps the top-left (h2, w2) region.
    pub fn crop_top_left(dims: [usize; 4], h2: usize, w2: usize) -> Vec<usize> {
        let [b, h, w, c] = dims;
        let mut idx = Vec::with_capacity(b * h2 * w2 * c);
        for bi in 0..b {
            for y in 0..h2 {
                for x in 0..w2 {
                    for ch in 0..c {
                        idx.push(((bi * h + y) * w + x) * c + ch);
                    }
                }
            }
        }
        idx
    }

    /// Channels `[from, from + count)` of a tensor with `c` channels and `rows` sites.
    pub fn channel_slice(rows: usize, c: usize, from: usize, count: usize) -> Vec<usize> {
        (0..rows).flat_map(|r| (from..from + count).map(move |ch| r * c + ch)).collect()
    }

    /// Swaps the last two axes of a (P, m, n) tensor.
    pub fn transpose_last2(p: usize, m: usize, n: usize) -> Vec<usize> {
        let mut idx = Vec::with_capacity(p * m * n);
        for pi in 0..p {
            for j in 0..n {
                for i in 0..m {
                    idx.push((pi * m + i) * n + j);
                }
            }
        }
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_index_walks_strides() {
        let strides = broadcast_strides(&[2, 2, 3], &[2, 1, 3]).unwrap();
        assert_eq!(strides, vec![3, 0, 1]);
        let idx = broadcast_index(&[2, 2, 3], &strides);
        assert_eq!(idx, vec![0, 1, 2, 0, 1, 2, 3, 4, 5, 3, 4, 5]);
        assert!(broadcast_strides(&[2, 3], &[3, 3]).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(TensorMap::full(vec![2], 3.0));
        let p = g.param(TensorMap::full(vec![2], 2.0));
        let s = g.add(c, p).unwrap();
        let root = g.sum(s);
        let grads = g.backward(root).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let p = g.param(TensorMap::full(vec![3], 1.5));
        let a = g.add(p, p).unwrap();
        let m = g.mul(a, p).unwrap();
        let root = g.sum(m);
        // d/dp Σ 2p² = 4p
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[6.0, 6.0, 6.0]);
    }

    #[test]
    fn bmm_shapes_are_checked() {
        let mut g = Graph::new();
        let a = g.param(TensorMap::zeros(vec![2, 3, 4]));
        let b = g.param(TensorMap::zeros(vec![2, 5, 4]));
        let c = g.bmm(a, b, true).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 5]);
        let err = g.bmm(a, b, false).unwrap_err().to_string();
        assert!(err.contains("[2, 3, 4]") && err.contains("[2, 5, 4]"));
    }
}
