//! Reconstruction and classification losses.

use crate::autodiff::Var;
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Element, Tensor};

/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean squared error of two equally shaped tensors.
pub fn mse<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(dim_err!("mse of {:?} and {:?}", x.shape(), y.shape()));
    }
    let n = x.numel().max(1) as f64;
    Ok(x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum::<f64>()
        / n)
}

/// Differentiable mean squared error.
pub fn mse_loss<'t, T: Element>(x: Var<'t, T>, y: Var<'t, T>) -> Result<Var<'t, T>> {
    let d = x.sub(y)?;
    Ok(d.mul(d)?.mean())
}

/// `onehot(class)·(1 − alpha) + alpha / classes`.
pub fn smooth_labels<T: Element>(class: usize, alpha: f64, classes: usize) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Contract(format!("label smoothing alpha must be in [0, 1), got {alpha}")));
    }
    if class >= classes {
        return Err(Error::Contract(format!("class {class} out of range for {classes} classes")));
    }
    let off = alpha / classes as f64;
    let on = 1.0 - alpha * (classes - 1) as f64 / classes as f64;
    Ok(Tensor::from_fn([classes], |i| T::from_f64(if i == class { on } else { off })))
}

/// Shannon entropy (nats) of a probability vector.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossEntropy {
    pub value: f64,
    /// Set when some probability with nonzero target mass hit [`PROB_FLOOR`].
    pub clamped: bool,
}

/// `−Σ target·log(probs)` on explicit probabilities.
pub fn cross_entropy<T: Element>(probs: &Tensor<T>, target: &Tensor<T>) -> Result<CrossEntropy> {
    if probs.shape() != target.shape() {
        return Err(dim_err!("cross_entropy of {:?} and {:?}", probs.shape(), target.shape()));
    }
    let mut clamped = false;
    let mut value = 0.0;
    for (&p, &t) in probs.data().iter().zip(target.data()) {
        let (p, t) = (p.as_f64(), t.as_f64());
        if t == 0.0 {
            continue;
        }
        if p < PROB_FLOOR {
            clamped = true;
        }
        value -= t * p.max(PROB_FLOOR).ln();
    }
    Ok(CrossEntropy { value, clamped })
}

/// Mean cross-entropy of `[batch, classes]` logits against target
/// distributions, via log-softmax.
pub fn cross_entropy_logits<'t, T: Element>(logits: Var<'t, T>, targets: &Tensor<T>) -> Result<Var<'t, T>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[..] != *targets.shape() {
        return Err(dim_err!("logits {shape:?} vs targets {:?}", targets.shape()));
    }
    let batch = T::from_f64(shape[0].max(1) as f64);
    let log_p = logits.log_softmax(1)?;
    let t = logits.tape().constant(targets.clone());
    Ok(log_p.mul(t)?.sum().scale(-T::one() / batch))
}
