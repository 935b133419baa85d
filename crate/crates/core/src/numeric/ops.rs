//! Differentiable primitives with explicit forward and backward rules.

use super::Matrix;
use crate::error::{Error, Result};

/// Gradients of `sum(upstream ⊙ affine_forward(input, weights, bias))`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads {
    pub input: Matrix,
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// `input · weights + bias`, with `bias` broadcast to every row.
pub fn affine_forward(input: &Matrix, weights: &Matrix, bias: &[f64]) -> Result<Matrix> {
    if bias.len() != weights.cols() {
        return Err(Error::shape(
            "affine_forward",
            format!("bias of length {}", weights.cols()),
            bias.len(),
        ));
    }
    let mut out = input.matmul(weights)?;
    for r in 0..out.rows() {
        for (o, b) in out.row_mut(r).iter_mut().zip(bias) {
            *o += b;
        }
    }
    Ok(out)
}

pub fn affine_backward(upstream: &Matrix, input: &Matrix, weights: &Matrix) -> Result<AffineGrads> {
    if input.cols() != weights.rows() || upstream.shape() != (input.rows(), weights.cols()) {
        return Err(Error::shape(
            "affine_backward",
            format!("upstream {}x{}", input.rows(), weights.cols()),
            format!("{}x{}", upstream.rows(), upstream.cols()),
        ));
    }
    let grad_input = upstream.matmul(&weights.transpose())?;
    let grad_weights = input.transpose().matmul(upstream)?;
    let mut grad_bias = vec![0.0; upstream.cols()];
    for r in 0..upstream.rows() {
        for (g, u) in grad_bias.iter_mut().zip(upstream.row(r)) {
            *g += u;
        }
    }
    Ok(AffineGrads {
        input: grad_input,
        weights: grad_weights,
        bias: grad_bias,
    })
}

pub fn relu_forward(input: &Matrix) -> Matrix {
    let mut out = input.clone();
    for v in out.as_mut_slice() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Passes `upstream` where the forward input was strictly positive.
pub fn relu_backward(upstream: &Matrix, input: &Matrix) -> Result<Matrix> {
    if upstream.shape() != input.shape() {
        return Err(Error::shape(
            "relu_backward",
            format!("{}x{}", input.rows(), input.cols()),
            format!("{}x{}", upstream.rows(), upstream.cols()),
        ));
    }
    let mut out = upstream.clone();
    for (o, &x) in out.as_mut_slice().iter_mut().zip(input.as_slice()) {
        if x <= 0.0 {
            *o = 0.0;
        }
    }
    Ok(out)
}

/// Two-way softmax computed after subtracting the larger logit.
pub fn softmax2_forward(logits: [f64; 2]) -> Result<[f64; 2]> {
    if !logits.iter().all(|z| z.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logits {logits:?}")));
    }
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    let p0 = e0 / s;
    Ok([p0, 1.0 - p0])
}

/// Maps `dL/dp` to `dL/dz` given the forward probabilities.
pub fn softmax2_backward(probs: [f64; 2], upstream: [f64; 2]) -> [f64; 2] {
    let dot = probs[0] * upstream[0] + probs[1] * upstream[1];
    [probs[0] * (upstream[0] - dot), probs[1] * (upstream[1] - dot)]
}

/// `params ← params − learning_rate · grads`.
pub fn sgd_update(params: &mut [f64], grads: &[f64], learning_rate: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape("sgd_update", params.len(), grads.len()));
    }
    if !(learning_rate > 0.0) || !learning_rate.is_finite() {
        return Err(Error::Config(format!(
            "learning rate must be positive, got {learning_rate}"
        )));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= learning_rate * g;
    }
    Ok(())
}
