//! Reverse-mode differentiation over dense matrices.
//!
//! A [`GradContext`] records one forward pass. Leaves are either named
//! parameters (which receive gradients), constants (which never do), or
//! anonymous inputs that need a gradient. Calling [`GradContext::backward`]
//! consumes the record; a second call is an error.

use std::collections::BTreeMap;

use super::functions::{gelu_approx, gelu_approx_grad};
use super::matrix::DenseMatrix;
use super::params::Params;
use crate::error::{Result, SemiError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Softmax(usize),
    LayerNorm { input: usize, inv_std: Vec<f64> },
    ConcatRows(Vec<usize>),
    SliceRows { input: usize, start: usize },
    Reshape(usize),
    GatherRows { table: usize, idx: Vec<usize> },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: DenseMatrix },
    Sum(Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: DenseMatrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct GradContext {
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
    consumed: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&DenseMatrix> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|&(_, id)| self.grads[id].as_ref())
    }

    /// Gradient w.r.t. an arbitrary recorded value, if it was tracked.
    pub fn wrt(&self, var: Var) -> Option<&DenseMatrix> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn into_params(mut self) -> Params {
        let mut out = BTreeMap::new();
        for (name, id) in &self.params {
            if let Some(g) = self.grads[*id].take() {
                out.insert(name.clone(), g);
            }
        }
        Params::from_map(out)
    }
}

impl GradContext {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: DenseMatrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Registers a trainable slot.
    pub fn param(&mut self, name: &str, value: DenseMatrix) -> Result<Var> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(SemiError::Graph(format!("parameter {name} registered twice")));
        }
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.to_string(), v.0));
        Ok(v)
    }

    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Anonymous leaf whose gradient is tracked (inspect it with [`Gradients::wrt`]).
    pub fn input(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(value, Op::MatMul(a.0, b.0), ng))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(value, Op::MatMulT(a.0, b.0), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(&[a.0]);
        self.push(value, Op::Transpose(a.0), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(value, Op::Add(a.0, b.0), ng))
    }

    /// Adds a `1 x m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(SemiError::Shape(format!(
                "add_row {:?} + {:?}",
                av.shape(),
                rv.shape()
            )));
        }
        let mut value = av.clone();
        for i in 0..value.rows() {
            for (d, r) in value.row_mut(i).iter_mut().zip(rv.data()) {
                *d += r;
            }
        }
        let ng = self.ng(&[a.0, row.0]);
        Ok(self.push(value, Op::AddRow(a.0, row.0), ng))
    }

    /// Multiplies every row of `a` element-wise by a `1 x m` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(SemiError::Shape(format!(
                "mul_row {:?} * {:?}",
                av.shape(),
                rv.shape()
            )));
        }
        let mut value = av.clone();
        for i in 0..value.rows() {
            for (d, r) in value.row_mut(i).iter_mut().zip(rv.data()) {
                *d *= r;
            }
        }
        let ng = self.ng(&[a.0, row.0]);
        Ok(self.push(value, Op::MulRow(a.0, row.0), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(SemiError::Shape(format!("mul {:?} * {:?}", av.shape(), bv.shape())));
        }
        let value = av.zip_map(bv, |x, y| x * y);
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(value, Op::Mul(a.0, b.0), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let ng = self.ng(&[a.0]);
        self.push(value, Op::Scale(a.0, c), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu_approx);
        let ng = self.ng(&[a.0]);
        self.push(value, Op::Gelu(a.0), ng)
    }

    /// Row-wise softmax. With `causal`, entries above the diagonal are masked
    /// out (probability exactly zero).
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Var {
        let av = self.value(a);
        let mut value = av.clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let limit = if causal { (i + 1).min(row.len()) } else { row.len() };
            let max = row[..limit].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row[..limit].iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row[..limit].iter_mut() {
                *v /= z;
            }
            for v in row[limit..].iter_mut() {
                *v = 0.0;
            }
        }
        let ng = self.ng(&[a.0]);
        self.push(value, Op::Softmax(a.0), ng)
    }

    /// Per-row standardisation without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let mut value = av.clone();
        let mut inv_std = Vec::with_capacity(av.rows());
        let n = av.cols() as f64;
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let s = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            inv_std.push(s);
        }
        let ng = self.ng(&[a.0]);
        self.push(value, Op::LayerNorm { input: a.0, inv_std }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&DenseMatrix> = parts.iter().map(|p| self.value(*p)).collect();
        let value = DenseMatrix::vstack(&mats)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.ng(&ids);
        Ok(self.push(value, Op::ConcatRows(ids), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start > end || end > av.rows() {
            return Err(SemiError::Shape(format!(
                "row slice {start}..{end} of {} rows",
                av.rows()
            )));
        }
        let value = av.slice_rows(start, end);
        let ng = self.ng(&[a.0]);
        Ok(self.push(value, Op::SliceRows { input: a.0, start }, ng))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(a).clone().reshape(rows, cols)?;
        let ng = self.ng(&[a.0]);
        Ok(self.push(value, Op::Reshape(a.0), ng))
    }

    /// Embedding lookup: row `idx[k]` of `table` becomes output row `k`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= tv.rows()) {
            return Err(SemiError::InputDomain(format!(
                "row index {bad} out of range for table with {} rows",
                tv.rows()
            )));
        }
        let mut value = DenseMatrix::zeros(idx.len(), tv.cols());
        for (k, &i) in idx.iter().enumerate() {
            value.row_mut(k).copy_from_slice(tv.row(i));
        }
        let ng = self.ng(&[table.0]);
        Ok(self.push(
            value,
            Op::GatherRows {
                table: table.0,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Mean softmax cross-entropy over rows; yields a `1 x 1` value.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = softmax_xent_forward(self.value(logits), targets)?;
        let ng = self.ng(&[logits.0]);
        Ok(self.push(
            DenseMatrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Sum of equally shaped values.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| SemiError::Graph("sum of nothing".into()))?;
        let mut value = self.value(*first).clone();
        for p in &parts[1..] {
            value.add_assign(self.value(*p))?;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.ng(&ids);
        Ok(self.push(value, Op::Sum(ids), ng))
    }

    /// Back-propagates from a scalar. The record cannot be reused afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(SemiError::Graph(
                "backward already ran on this forward record".into(),
            ));
        }
        self.consumed = true;
        if self.value(loss).shape() != (1, 1) {
            return Err(SemiError::Graph(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<DenseMatrix>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(DenseMatrix::filled(1, 1, 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        for (_, id) in &self.params {
            if grads[*id].is_none() {
                let (r, c) = self.nodes[*id].value.shape();
                grads[*id] = Some(DenseMatrix::zeros(r, c));
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(
        &self,
        id: usize,
        g: &DenseMatrix,
        grads: &mut [Option<DenseMatrix>],
    ) -> Result<()> {
        let nodes = &self.nodes;
        let mut acc = |target: usize, delta: DenseMatrix| -> Result<()> {
            if !nodes[target].needs_grad {
                return Ok(());
            }
            match &mut grads[target] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        let val = |i: usize| &nodes[i].value;
        let need = |i: usize| nodes[i].needs_grad;

        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if need(*a) {
                    acc(*a, g.matmul_t(val(*b))?)?;
                }
                if need(*b) {
                    acc(*b, val(*a).t_matmul(g)?)?;
                }
            }
            Op::MatMulT(a, b) => {
                // out = a b^T: da = g b, db = g^T a
                if need(*a) {
                    acc(*a, g.matmul(val(*b))?)?;
                }
                if need(*b) {
                    acc(*b, g.t_matmul(val(*a))?)?;
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose())?,
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone())?;
                if need(*r) {
                    acc(*r, column_sums(g))?;
                }
            }
            Op::MulRow(a, r) => {
                let rv = val(*r);
                if need(*a) {
                    let mut da = g.clone();
                    for i in 0..da.rows() {
                        for (d, s) in da.row_mut(i).iter_mut().zip(rv.data()) {
                            *d *= s;
                        }
                    }
                    acc(*a, da)?;
                }
                if need(*r) {
                    acc(*r, column_sums(&g.zip_map(val(*a), |x, y| x * y)))?;
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y))?;
                }
                if need(*b) {
                    acc(*b, g.zip_map(val(*a), |x, y| x * y))?;
                }
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c))?,
            Op::Gelu(a) => acc(*a, g.zip_map(val(*a), |gy, x| gy * gelu_approx_grad(x)))?,
            Op::Softmax(a) => {
                let p = &nodes[id].value;
                let mut da = DenseMatrix::zeros(p.rows(), p.cols());
                for i in 0..p.rows() {
                    let (pr, gr) = (p.row(i), g.row(i));
                    let inner: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for (d, (pv, gv)) in da.row_mut(i).iter_mut().zip(pr.iter().zip(gr)) {
                        *d = pv * (gv - inner);
                    }
                }
                acc(*a, da)?;
            }
            Op::LayerNorm { input, inv_std } => {
                let y = &nodes[id].value;
                let n = y.cols() as f64;
                let mut da = DenseMatrix::zeros(y.rows(), y.cols());
                for (i, &is) in inv_std.iter().enumerate() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for (d, (yv, gv)) in da.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                        *d = is * (gv - mean_g - yv * mean_gy);
                    }
                }
                acc(*input, da)?;
            }
            Op::ConcatRows(ids) => {
                let mut start = 0;
                for &p in ids {
                    let rows = val(p).rows();
                    if need(p) {
                        acc(p, g.slice_rows(start, start + rows))?;
                    }
                    start += rows;
                }
            }
            Op::SliceRows { input, start } => {
                let src = val(*input);
                let mut da = DenseMatrix::zeros(src.rows(), src.cols());
                let c = src.cols();
                da.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*input, da)?;
            }
            Op::Reshape(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, g.clone().reshape(r, c)?)?;
            }
            Op::GatherRows { table, idx } => {
                let tv = val(*table);
                let mut dt = DenseMatrix::zeros(tv.rows(), tv.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (d, s) in dt.row_mut(i).iter_mut().zip(g.row(k)) {
                        *d += s;
                    }
                }
                acc(*table, dt)?;
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.get(0, 0) / targets.len() as f64;
                let mut dl = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    let v = dl.get(i, t);
                    dl.set(i, t, v - 1.0);
                }
                acc(*logits, dl.scale(scale))?;
            }
            Op::Sum(ids) => {
                for &p in ids {
                    acc(p, g.clone())?;
                }
            }
        }
        Ok(())
    }
}

fn column_sums(m: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(1, m.cols());
    for i in 0..m.rows() {
        for (d, s) in out.data_mut().iter_mut().zip(m.row(i)) {
            *d += s;
        }
    }
    out
}

/// Shared forward for the cross-entropy node and the standalone function.
pub(crate) fn softmax_xent_forward(
    logits: &DenseMatrix,
    targets: &[usize],
) -> Result<(f64, DenseMatrix)> {
    if targets.is_empty() || targets.len() != logits.rows() {
        return Err(SemiError::InputDomain(format!(
            "{} targets for {} logit rows",
            targets.len(),
            logits.rows()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(SemiError::InputDomain(format!(
            "target {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    let mut probs = logits.clone();
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = probs.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v -= max;
            z += v.exp();
        }
        let log_z = z.ln();
        loss -= row[t] - log_z;
        for v in row.iter_mut() {
            *v = (*v - log_z).exp();
        }
    }
    Ok((loss / targets.len() as f64, probs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_twice_is_an_error() {
        let mut ctx = GradContext::new();
        let w = ctx.param("w", DenseMatrix::filled(1, 1, 2.0)).unwrap();
        let y = ctx.mul(w, w).unwrap();
        let g = ctx.backward(y).unwrap();
        assert_eq!(g.get("w").unwrap().get(0, 0), 4.0);
        assert!(matches!(ctx.backward(y), Err(SemiError::Graph(_))));
    }

    #[test]
    fn unreached_params_get_zero_gradients_of_matching_shape() {
        let mut ctx = GradContext::new();
        let w = ctx.param("w", DenseMatrix::filled(1, 1, 2.0)).unwrap();
        ctx.param("unused", DenseMatrix::filled(3, 2, 1.0)).unwrap();
        let g = ctx.backward(w).unwrap();
        assert_eq!(g.get("unused").unwrap(), &DenseMatrix::zeros(3, 2));
    }

    #[test]
    fn duplicate_param_rejected() {
        let mut ctx = GradContext::new();
        ctx.param("w", DenseMatrix::zeros(1, 1)).unwrap();
        assert!(ctx.param("w", DenseMatrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut ctx = GradContext::new();
        let c = ctx.constant(DenseMatrix::filled(2, 2, 1.0));
        let w = ctx.param("w", DenseMatrix::filled(2, 1, 0.5)).unwrap();
        let y = ctx.matmul(c, w).unwrap();
        let t = ctx.transpose(y);
        let s = ctx.matmul(t, y).unwrap();
        let g = ctx.backward(s).unwrap();
        assert!(g.wrt(c).is_none());
        assert_eq!(g.names().collect::<Vec<_>>(), vec!["w"]);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut ctx = GradContext::new();
        let a = ctx.constant(DenseMatrix::from_fn(3, 3, |i, j| (i + j) as f64));
        let p = ctx.softmax_rows(a, true);
        let p = ctx.value(p);
        assert_eq!(p.get(0, 1), 0.0);
        assert_eq!(p.get(0, 0), 1.0);
        assert_eq!(p.get(1, 2), 0.0);
        assert!((p.row(2).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
