use crate::error::{Error, Result};

use super::{Real, Tensor4};

/// Probabilities are clamped to `[LOSS_EPS, 1 - LOSS_EPS]` before taking logs.
pub const LOSS_EPS: f64 = 1e-7;

fn check(p: &Tensor4<impl Real>, y: &Tensor4<impl Real>) -> Result<()> {
    if p.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "loss: prediction {:?} vs target {:?}",
            p.shape(),
            y.shape()
        )));
    }
    if p.is_empty() {
        return Err(Error::Shape("loss over an empty tensor".into()));
    }
    Ok(())
}

/// Mean binary cross entropy and its gradient with respect to `p`.
pub fn bce_loss<T: Real>(p: &Tensor4<T>, y: &Tensor4<T>) -> Result<(T, Tensor4<T>)> {
    check(p, y)?;
    let eps = T::from_f64c(LOSS_EPS);
    let one = T::one();
    let inv_n = one / T::from_usize(p.len()).expect("len");
    let mut total = 0.0f64;
    let mut grad = Vec::with_capacity(p.len());
    for (&pv, &yv) in p.data().iter().zip(y.data()) {
        let pc = pv.max(eps).min(one - eps);
        let term = yv * pc.ln() + (one - yv) * (one - pc).ln();
        total += term.to_f64().expect("finite");
        grad.push(-(yv / pc - (one - yv) / (one - pc)) * inv_n);
    }
    let loss = T::from_f64c(-total / p.len() as f64);
    Ok((loss, Tensor4::from_vec(p.shape(), grad)?))
}

/// BCE with the positive term scaled by `w_pos`.
pub fn weighted_bce_loss<T: Real>(p: &Tensor4<T>, y: &Tensor4<T>, w_pos: T) -> Result<(T, Tensor4<T>)> {
    check(p, y)?;
    if !w_pos.is_finite() || w_pos < T::zero() {
        return Err(Error::Parameter(format!(
            "w_pos must be finite and >= 0, got {w_pos:?}"
        )));
    }
    let eps = T::from_f64c(LOSS_EPS);
    let one = T::one();
    let inv_n = one / T::from_usize(p.len()).expect("len");
    let mut total = 0.0f64;
    let mut grad = Vec::with_capacity(p.len());
    for (&pv, &yv) in p.data().iter().zip(y.data()) {
        let pc = pv.max(eps).min(one - eps);
        let wy = w_pos * yv;
        let term = wy * pc.ln() + (one - yv) * (one - pc).ln();
        total += term.to_f64().expect("finite");
        grad.push(-(wy / pc - (one - yv) / (one - pc)) * inv_n);
    }
    let loss = T::from_f64c(-total / p.len() as f64);
    Ok((loss, Tensor4::from_vec(p.shape(), grad)?))
}

/// Gradient of mean (weighted) BCE with respect to the logits `z` of
/// `p = sigmoid(z)`: `(p (w y + 1 - y) - w y) / N`. Unlike chaining the
/// probability gradient through the sigmoid, it does not vanish when `p`
/// saturates.
pub fn bce_logit_grad<T: Real>(p: &Tensor4<T>, y: &Tensor4<T>, w_pos: T) -> Result<Tensor4<T>> {
    check(p, y)?;
    let one = T::one();
    let inv_n = one / T::from_usize(p.len()).expect("len");
    let grad = p
        .data()
        .iter()
        .zip(y.data())
        .map(|(&pv, &yv)| (pv * (w_pos * yv + one - yv) - w_pos * yv) * inv_n)
        .collect();
    Tensor4::from_vec(p.shape(), grad)
}
