use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Real;

/// A named trainable parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![T::zero(); len],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every parameter tensor, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(hyper: AdamHyper, params: &[Param<T>]) -> Self {
        Self {
            hyper,
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.data.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.data.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update. Parameters are left untouched if any
/// gradient is non-finite.
pub fn adam_step<T: Real>(params: &mut [Param<T>], grads: &[Vec<T>], state: &mut AdamState<T>) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.data.len() != g.len() {
            return Err(Error::Shape(format!(
                "adam: gradient for `{}` has {} entries, expected {}",
                p.name,
                g.len(),
                p.data.len()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Optimizer { param: p.name.clone() });
        }
    }
    state.step += 1;
    let h = state.hyper;
    let t = state.step as i32;
    let b1 = T::from_f64c(h.beta1);
    let b2 = T::from_f64c(h.beta2);
    let one = T::one();
    let c1 = T::from_f64c(1.0 - h.beta1.powi(t));
    let c2 = T::from_f64c(1.0 - h.beta2.powi(t));
    let lr = T::from_f64c(h.lr);
    let eps = T::from_f64c(h.eps);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p.data[j] = p.data[j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
