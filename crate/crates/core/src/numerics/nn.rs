//! Layers shared by the decoder, projector and hypernetwork.

use rand::Rng;

use super::graph::{GradContext, Var};
use super::matrix::DenseMatrix;
use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;

/// `x W^T + b` with `W` stored as `[out x in]`.
pub fn linear(ctx: &mut GradContext, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = ctx.matmul_t(x, w)?;
    ctx.add_row(h, b)
}

/// Inverted dropout with a freshly sampled mask. `rate == 0` is the identity.
pub fn dropout<R: Rng + ?Sized>(ctx: &mut GradContext, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let (r, c) = ctx.value(x).shape();
    let keep = 1.0 / (1.0 - rate);
    let mask = DenseMatrix::from_fn(r, c, |_, _| if rng.random::<f64>() < rate { 0.0 } else { keep });
    let m = ctx.constant(mask);
    ctx.mul(x, m)
}

/// Single-head attention weights, right-multiplied (`x W`).
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Pre-norm residual self-attention: `x + softmax(QK^T/sqrt(d)) V W_o`,
/// with optional dropout on the attention branch.
pub fn attention_block<R: Rng + ?Sized>(
    ctx: &mut GradContext,
    x: Var,
    w: AttentionVars,
    causal: bool,
    dropout_rate: Option<(f64, &mut R)>,
) -> Result<Var> {
    let rows = ctx.value(x).rows();
    batched_attention_block(ctx, x, w, &[(0, rows)], causal, dropout_rate)
}

/// Same as [`attention_block`] for several sequences stacked row-wise.
/// `segments` holds `(start_row, len)`; attention never crosses segments.
pub fn batched_attention_block<R: Rng + ?Sized>(
    ctx: &mut GradContext,
    x: Var,
    w: AttentionVars,
    segments: &[(usize, usize)],
    causal: bool,
    dropout_rate: Option<(f64, &mut R)>,
) -> Result<Var> {
    let d = ctx.value(x).cols() as f64;
    let h = ctx.layer_norm(x, LN_EPS);
    let q = ctx.matmul(h, w.wq)?;
    let k = ctx.matmul(h, w.wk)?;
    let v = ctx.matmul(h, w.wv)?;
    let mut mixed = Vec::with_capacity(segments.len());
    for &(start, len) in segments {
        let qs = ctx.slice_rows(q, start, start + len)?;
        let ks = ctx.slice_rows(k, start, start + len)?;
        let vs = ctx.slice_rows(v, start, start + len)?;
        let scores = ctx.matmul_t(qs, ks)?;
        let scores = ctx.scale(scores, 1.0 / d.sqrt());
        let p = ctx.softmax_rows(scores, causal);
        mixed.push(ctx.matmul(p, vs)?);
    }
    let mixed = if mixed.len() == 1 { mixed[0] } else { ctx.concat_rows(&mixed)? };
    let mut out = ctx.matmul(mixed, w.wo)?;
    if let Some((rate, rng)) = dropout_rate {
        out = dropout(ctx, out, rate, rng)?;
    }
    ctx.add(x, out)
}

/// Plain (unrecorded) layer norm over rows.
pub fn layer_norm_plain(x: &DenseMatrix) -> DenseMatrix {
    let mut out = x.clone();
    let n = x.cols() as f64;
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let s = 1.0 / (var + LN_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * s);
    }
    out
}

/// Plain causal/non-causal attention block matching [`attention_block`]
/// in evaluation mode.
pub fn attention_block_plain(
    x: &DenseMatrix,
    wq: &DenseMatrix,
    wk: &DenseMatrix,
    wv: &DenseMatrix,
    wo: &DenseMatrix,
    causal: bool,
) -> Result<DenseMatrix> {
    let d = x.cols() as f64;
    let h = layer_norm_plain(x);
    let q = h.matmul(wq)?;
    let k = h.matmul(wk)?;
    let v = h.matmul(wv)?;
    let mut p = q.matmul_t(&k)?.scale(1.0 / d.sqrt());
    for i in 0..p.rows() {
        let row = p.row_mut(i);
        let limit = if causal { (i + 1).min(row.len()) } else { row.len() };
        let max = row[..limit].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for e in row[..limit].iter_mut() {
            *e = (*e - max).exp();
            z += *e;
        }
        row[..limit].iter_mut().for_each(|e| *e /= z);
        row[limit..].iter_mut().for_each(|e| *e = 0.0);
    }
    let out = p.matmul(&v)?.matmul(wo)?;
    x.add(&out)
}
