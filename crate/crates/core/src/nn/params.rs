//! Named parameter sets, their initialization, and binding into a [`Graph`].

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::TensorMap;

/// Learnable tensors keyed by dotted names such as `rgb.s1.expand.w`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, TensorMap>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: TensorMap) -> Option<TensorMap> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&TensorMap> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut TensorMap> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorMap)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut TensorMap)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(TensorMap::len).sum()
    }

    /// Tensors whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(TensorMap::is_finite)
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((ka, va), (kb, vb))| ka == kb && va.bit_eq(vb))
    }
}

impl FromIterator<(String, TensorMap)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, TensorMap)>>(iter: I) -> Self {
        ParamSet { tensors: iter.into_iter().collect() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// N(0, 2 / fan_in).
    Kaiming { fan_in: usize },
    Zeros,
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Ordered list of parameter declarations. Building a model's spec list and
/// running its forward pass use the same names, so the two stay in sync.
#[derive(Clone, Debug, Default)]
pub struct SpecList {
    specs: Vec<ParamSpec>,
}

impl SpecList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init) {
        self.specs.push(ParamSpec { name: name.into(), shape, init });
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn count(&self) -> usize {
        self.specs.iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    /// Regular convolution `name.w` (kh, kw, cin, cout) with optional bias `name.b`.
    pub fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize, bias: bool) {
        self.push(format!("{name}.w"), vec![k, k, cin, cout], Init::Kaiming { fan_in: k * k * cin });
        if bias {
            self.push(format!("{name}.b"), vec![cout], Init::Zeros);
        }
    }

    /// Convolution with a k×1 kernel (along the leading spatial axis).
    pub fn conv_strip(&mut self, name: &str, k: usize, cin: usize, cout: usize) {
        self.push(format!("{name}.w"), vec![k, 1, cin, cout], Init::Kaiming { fan_in: k * cin });
        self.push(format!("{name}.b"), vec![cout], Init::Zeros);
    }

    pub fn depthwise(&mut self, name: &str, k: usize, c: usize) {
        self.push(format!("{name}.w"), vec![k, k, 1, c], Init::Kaiming { fan_in: k * k });
        self.push(format!("{name}.b"), vec![c], Init::Zeros);
    }

    pub fn prelu(&mut self, name: &str, c: usize) {
        self.push(format!("{name}.alpha"), vec![c], Init::Const(0.25));
    }

    pub fn inverted_residual(&mut self, name: &str, cin: usize, cout: usize, expansion: usize) {
        let hidden = cin * expansion;
        self.conv(&format!("{name}.expand"), 1, cin, hidden, true);
        self.prelu(&format!("{name}.expand_act"), hidden);
        self.depthwise(&format!("{name}.dw"), 3, hidden);
        self.prelu(&format!("{name}.dw_act"), hidden);
        self.conv(&format!("{name}.project"), 1, hidden, cout, true);
    }

    /// Draws every tensor from its own stream keyed by (seed, name), so a tensor's
    /// initial value does not depend on which other tensors are declared. Values
    /// are rounded to f32 so a fresh draw survives a checkpoint bit-exactly.
    pub fn materialize(&self, seed: u64) -> ParamSet {
        self.specs
            .iter()
            .map(|s| {
                let t = match s.init {
                    Init::Kaiming { fan_in } => {
                        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &s.name));
                        TensorMap::randn(s.shape.clone(), (2.0 / fan_in as f64).sqrt(), &mut rng).quantize_f32()
                    }
                    Init::Zeros => TensorMap::zeros(s.shape.clone()),
                    Init::Const(v) => TensorMap::full(s.shape.clone(), v),
                };
                (s.name.clone(), t)
            })
            .collect()
    }

    /// Checks that `params` holds exactly these names with these shapes.
    pub fn check(&self, params: &ParamSet) -> Result<()> {
        for s in &self.specs {
            match params.get(&s.name) {
                None => return Err(Error::MissingParam(s.name.clone())),
                Some(t) if t.shape() != s.shape.as_slice() => {
                    return Err(Error::shape(format!(
                        "parameter `{}` has shape {:?}, expected {:?}",
                        s.name,
                        t.shape(),
                        s.shape
                    )))
                }
                Some(_) => {}
            }
        }
        if params.len() != self.specs.len() {
            let known: std::collections::HashSet<_> = self.specs.iter().map(|s| s.name.as_str()).collect();
            let extra: Vec<_> = params.names().filter(|n| !known.contains(n)).collect();
            return Err(Error::config(format!("unexpected parameters: {extra:?}")));
        }
        Ok(())
    }
}

/// FNV-1a over the name, mixed with the seed through SplitMix64.
pub fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A graph plus lazily bound parameters.
pub struct Ctx<'p> {
    pub g: Graph,
    params: &'p ParamSet,
    bound: BTreeMap<String, Var>,
    trainable: Option<Box<dyn Fn(&str) -> bool + 'p>>,
}

impl<'p> Ctx<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self { g: Graph::new(), params, bound: BTreeMap::new(), trainable: None }
    }

    /// Parameters rejected by `filter` enter the graph as constants.
    pub fn with_trainable(params: &'p ParamSet, filter: impl Fn(&str) -> bool + 'p) -> Self {
        Self { trainable: Some(Box::new(filter)), ..Self::new(params) }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))?.clone();
        let v = match &self.trainable {
            Some(f) if !f(name) => self.g.constant(t),
            _ => self.g.param(t),
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradients of `root` for every bound trainable parameter; parameters that
    /// did not influence `root` get zero tensors.
    pub fn param_grads(&self, root: Var) -> Result<ParamSet> {
        let mut grads = self.g.backward(root)?;
        let mut out = ParamSet::new();
        for (name, v) in &self.bound {
            if let Some(f) = &self.trainable {
                if !f(name) {
                    continue;
                }
            }
            let g = grads.take(*v).unwrap_or_else(|| TensorMap::zeros(self.g.shape(*v).to_vec()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}
