use std::f64::consts::PI;

use super::graph::softmax_xent_forward;
use super::matrix::DenseMatrix;
use crate::error::{Result, SemiError};

const GELU_CUBIC: f64 = 0.044715;

/// Tanh approximation of GELU.
pub fn gelu_approx(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_CUBIC * x * x * x)).tanh())
}

pub fn gelu_approx_grad(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    let t = (c * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// Mean softmax cross-entropy over the rows of `logits` and its gradient
/// `(softmax - onehot) / B`.
pub fn softmax_cross_entropy(logits: &DenseMatrix, targets: &[usize]) -> Result<(f64, DenseMatrix)> {
    let (loss, mut grad) = softmax_xent_forward(logits, targets)?;
    let b = targets.len() as f64;
    for (i, &t) in targets.iter().enumerate() {
        let v = grad.get(i, t);
        grad.set(i, t, v - 1.0);
    }
    Ok((loss, grad.scale(1.0 / b)))
}

/// Sinusoidal position table: `sin(pos / 10000^(2i/dim))` at even columns
/// and the matching cosine at odd columns.
pub fn sinusoidal_pe(length: usize, dim: usize) -> Result<DenseMatrix> {
    if !dim.is_multiple_of(2) {
        return Err(SemiError::Config(format!(
            "positional encoding width must be even, got {dim}"
        )));
    }
    Ok(DenseMatrix::from_fn(length, dim, |pos, col| {
        let i = col / 2;
        let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        if col % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}
