use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay rate, applied as `p -= lr * weight_decay * p`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// GeM exponents end in `.p`; they skip weight decay and stay at or above 1.
pub fn is_gem_exponent(name: &str) -> bool {
    name.ends_with(".p")
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One bias-corrected Adam update of every non-frozen parameter that has a gradient.
///
/// A non-finite gradient aborts the step before any parameter changes.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    for (name, g) in grads {
        let p = store.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    for (name, g) in grads {
        if store.is_frozen(name) {
            continue;
        }
        let p = store.get(name)?;
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![T::zero(); g.numel()], vec![T::zero(); g.numel()]));
        let gem = is_gem_exponent(name);
        let decay = if gem { T::zero() } else { T::lit(lr * c.weight_decay) };
        let step = T::lit(lr);
        let (bc1, bc2, eps) = (T::lit(bc1), T::lit(bc2), T::lit(c.eps));
        let mut out = p.to_vec();
        for i in 0..out.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            out[i] = out[i] - step * mh / (vh.sqrt() + eps) - decay * out[i];
            if gem && out[i] < T::one() {
                out[i] = T::one();
            }
        }
        store.update(name, Tensor::new(p.shape(), out)?)?;
    }
    Ok(())
}
