//! Parameter storage and the differentiable layers the model is built from.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Real, Tensor, Var};

/// Default clamp applied before the GeM power.
pub const GEM_EPS: f64 = 1e-6;
/// Initial GeM exponent.
pub const GEM_P_INIT: f64 = 3.0;

/// Named parameters in sorted order, plus the set of frozen name prefixes.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    frozen: BTreeSet<String>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.params.keys().any(|k| k.starts_with(prefix))
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn freeze(&mut self, prefix: &str) {
        self.frozen.insert(prefix.to_string());
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn frozen_prefixes(&self) -> impl Iterator<Item = &String> {
        self.frozen.iter()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            frozen: self.frozen.clone(),
        }
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn update(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape("param update", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }
}

/// A graph under construction together with the parameters bound into it.
///
/// Each parameter becomes one leaf the first time it is requested; frozen
/// parameters (and every parameter in inference mode) do not require grad.
pub struct Session<'a, T: Real> {
    pub graph: Graph<T>,
    store: &'a ParamStore<T>,
    bound: BTreeMap<String, Var>,
    training: bool,
}

impl<'a, T: Real> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>, training: bool) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: BTreeMap::new(),
            training,
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let trainable = self.training && !self.store.is_frozen(name);
        let v = self.graph.leaf(value, trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.graph.constant(value)
    }

    /// Gradients of every bound parameter that requires one.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .filter(|(_, v)| self.graph.requires_grad(**v))
            .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }

    /// Gradients of every bound parameter including frozen ones (zero when
    /// the graph does not propagate to them).
    pub fn all_param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .map(|(k, v)| {
                let g = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.graph.shape(*v)));
                (k.clone(), g)
            })
            .collect()
    }
}

/// Stable 64-bit FNV-1a, used to derive per-parameter seeds from names.
pub fn name_hash(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ name_hash(name))
}

/// Kaiming-style uniform init with ReLU gain: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
fn kaiming<T: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

pub fn init_conv<T: Real>(store: &mut ParamStore<T>, name: &str, out: usize, inp: usize, k: usize, seed: u64) {
    let w = format!("{name}.w");
    let mut rng = param_rng(seed, &w);
    store.insert(&w, kaiming(&[out, inp, k, k], inp * k * k, &mut rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[out]));
}

pub fn init_dense<T: Real>(store: &mut ParamStore<T>, name: &str, out: usize, inp: usize, seed: u64) {
    let w = format!("{name}.w");
    let mut rng = param_rng(seed, &w);
    store.insert(&w, kaiming(&[out, inp], inp, &mut rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[out]));
}

pub fn init_gem<T: Real>(store: &mut ParamStore<T>, name: &str) {
    store.insert(format!("{name}.p"), Tensor::full(&[1], T::lit(GEM_P_INIT)));
}

/// Convolution plus per-channel bias, no activation.
pub fn conv<T: Real>(s: &mut Session<T>, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
    let w = s.param(&format!("{name}.w"))?;
    let b = s.param(&format!("{name}.b"))?;
    let y = s.graph.conv2d(x, w, stride, pad)?;
    let out_c = s.graph.shape(b)[0];
    let b = s.graph.reshape(b, &[1, out_c, 1, 1])?;
    s.graph.add(y, b)
}

/// Cross-correlation + bias + ReLU.
pub fn conv_block<T: Real>(s: &mut Session<T>, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
    let y = conv(s, x, name, stride, pad)?;
    Ok(s.graph.relu(y))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
    Softmax,
}

/// `activation(x W^T + b)` for `x` of shape `[n, in]`.
pub fn dense<T: Real>(s: &mut Session<T>, x: Var, name: &str, act: Activation) -> Result<Var> {
    let w = s.param(&format!("{name}.w"))?;
    let b = s.param(&format!("{name}.b"))?;
    let (xs, ws) = (s.graph.shape(x).to_vec(), s.graph.shape(w).to_vec());
    if xs.len() != 2 || xs[1] != ws[1] {
        return Err(Error::shape("dense", &xs, &ws));
    }
    let wt = s.graph.transpose(w)?;
    let y = s.graph.matmul(x, wt)?;
    let y = s.graph.add(y, b)?;
    Ok(match act {
        Activation::None => y,
        Activation::Relu => s.graph.relu(y),
        Activation::Sigmoid => s.graph.sigmoid(y),
        Activation::Softmax => s.graph.softmax(y, 1)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Gap,
    Gmp,
    Gem,
}

fn check_map<T: Real>(g: &Graph<T>, x: Var, op: &'static str) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 4 {
        return Err(Error::shape(op, s, &[]));
    }
    Ok(())
}

/// Spatial mean of `[n, c, h, w]` -> `[n, c]`.
pub fn gap<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    check_map(g, x, "gap")?;
    g.mean(x, &[2, 3], false)
}

/// Spatial max of `[n, c, h, w]` -> `[n, c]`.
pub fn gmp<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    check_map(g, x, "gmp")?;
    g.max(x, &[2, 3], false)
}

/// Generalized mean `(mean_u max(x, eps)^p)^(1/p)` per channel, with a
/// learnable exponent node `p` of shape `[1]`.
pub fn gem<T: Real>(g: &mut Graph<T>, x: Var, p: Var, eps: f64) -> Result<Var> {
    check_map(g, x, "gem")?;
    let clamped = g.clamp(x, eps, f64::INFINITY);
    let powered = g.pow(clamped, p)?;
    let m = g.mean(powered, &[2, 3], false)?;
    let inv = g.powf(p, -1.0);
    g.pow(m, inv)
}

/// Pools a feature map with the chosen kind; `gem_name` names the exponent
/// parameter (ignored for GAP/GMP).
pub fn pool<T: Real>(s: &mut Session<T>, x: Var, kind: PoolKind, gem_name: &str) -> Result<Var> {
    match kind {
        PoolKind::Gap => gap(&mut s.graph, x),
        PoolKind::Gmp => gmp(&mut s.graph, x),
        PoolKind::Gem => {
            let p = s.param(&format!("{gem_name}.p"))?;
            gem(&mut s.graph, x, p, GEM_EPS)
        }
    }
}

/// Zoom-and-shift bilinear resampling of `[n, c, h, w]` images with `[n, 4]`
/// params `(s_x, s_y, t_x, t_y)`.
pub fn affine_grid_sample<T: Real>(g: &mut Graph<T>, image: Var, params: Var, out_h: usize, out_w: usize) -> Result<Var> {
    g.grid_sample(image, params, out_h, out_w)
}
