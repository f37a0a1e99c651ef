//! Low-rank adapter algebra for the projector.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SemiError};
use crate::numerics::DenseMatrix;
use crate::projector::ProjectorParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterTarget {
    Layer1,
    Layer2,
}

/// `delta = (alpha / rank) * B A` with `A: [r x d_in]`, `B: [d_out x r]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub a: DenseMatrix,
    pub b: DenseMatrix,
    pub rank: usize,
    pub alpha: f64,
    pub target: AdapterTarget,
}

impl LoraAdapter {
    pub fn new(a: DenseMatrix, b: DenseMatrix, alpha: f64, target: AdapterTarget) -> Result<Self> {
        let rank = a.rows();
        if rank == 0 || b.cols() != rank {
            return Err(SemiError::Config(format!(
                "adapter factors {:?} and {:?} disagree on rank",
                a.shape(),
                b.shape()
            )));
        }
        if rank > a.cols().min(b.rows()) {
            return Err(SemiError::Config(format!(
                "rank {rank} exceeds min({}, {})",
                a.cols(),
                b.rows()
            )));
        }
        if !(alpha / rank as f64).is_finite() {
            return Err(SemiError::Config(format!("adapter scale alpha={alpha} is not finite")));
        }
        Ok(Self {
            a,
            b,
            rank,
            alpha,
            target,
        })
    }

    /// A zero adapter: Gaussian-free `A = 0`, `B = 0`.
    pub fn zeros(d_out: usize, d_in: usize, rank: usize, alpha: f64, target: AdapterTarget) -> Result<Self> {
        Self::new(DenseMatrix::zeros(rank, d_in), DenseMatrix::zeros(d_out, rank), alpha, target)
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }
}

/// Materialises `(alpha / r) B A` as a `[d_out x d_in]` matrix.
pub fn lora_delta(adapter: &LoraAdapter) -> DenseMatrix {
    adapter
        .b
        .matmul(&adapter.a)
        .expect("factor shapes are checked at construction")
        .scale(adapter.scale())
}

/// Adds `delta_bar` to `W1`, leaving the input untouched.
pub fn merge(psi: &ProjectorParams, delta_bar: &DenseMatrix) -> Result<ProjectorParams> {
    merge_into(psi, "w1", delta_bar)
}

/// Adds `delta_bar` to `W2` (two-layer adapter mode).
pub fn merge_layer2(psi: &ProjectorParams, delta_bar: &DenseMatrix) -> Result<ProjectorParams> {
    merge_into(psi, "w2", delta_bar)
}

fn merge_into(psi: &ProjectorParams, slot: &str, delta: &DenseMatrix) -> Result<ProjectorParams> {
    let w = psi.params.get(slot)?;
    if w.shape() != delta.shape() {
        return Err(SemiError::Config(format!(
            "delta {:?} does not match {slot} {:?}",
            delta.shape(),
            w.shape()
        )));
    }
    let mut out = psi.clone();
    *out.params.get_mut(slot)? = w.add(delta)?;
    Ok(out)
}

/// Adapters generated for one few-shot set, one per chunk.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdapterSet {
    pub adapters: Vec<LoraAdapter>,
    /// Second-layer adapters, empty unless two-layer generation is on.
    pub layer2: Vec<LoraAdapter>,
    /// Indices into the few-shot set consumed by each adapter.
    pub provenance: Vec<Vec<usize>>,
}

impl AdapterSet {
    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn push(&mut self, adapter: LoraAdapter, layer2: Option<LoraAdapter>, batch: Vec<usize>) -> Result<()> {
        if let Some(first) = self.adapters.first() {
            let same = first.rank == adapter.rank
                && first.alpha == adapter.alpha
                && first.a.shape() == adapter.a.shape()
                && first.b.shape() == adapter.b.shape();
            if !same {
                return Err(SemiError::Config("adapter set members must share rank, alpha and shapes".into()));
            }
        }
        if !self.adapters.is_empty() && layer2.is_some() == self.layer2.is_empty() {
            return Err(SemiError::Config("mixing one- and two-layer adapters".into()));
        }
        self.adapters.push(adapter);
        if let Some(l2) = layer2 {
            self.layer2.push(l2);
        }
        self.provenance.push(batch);
        Ok(())
    }
}

/// Mean of the materialised first-layer deltas.
pub fn average_adapters(set: &AdapterSet) -> Result<DenseMatrix> {
    mean_delta(&set.adapters)
}

/// Mean of the materialised deltas of `adapters`.
pub fn mean_delta(adapters: &[LoraAdapter]) -> Result<DenseMatrix> {
    let first = adapters
        .first()
        .ok_or_else(|| SemiError::Precondition("cannot average an empty adapter set".into()))?;
    let mut acc = DenseMatrix::zeros(first.d_out(), first.d_in());
    for a in adapters {
        acc.add_assign(&lora_delta(a))?;
    }
    Ok(acc.scale(1.0 / adapters.len() as f64))
}

/// Size of the factorised generation heads, `(n + m) r k`, and of a head
/// that would emit full `n x m` matrices, `n m k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenerationCount {
    pub factorized: u64,
    pub dense: u64,
}

pub fn generation_param_count(n: u64, m: u64, r: u64, k: u64) -> Result<GenerationCount> {
    if n == 0 || m == 0 || r == 0 || k == 0 {
        return Err(SemiError::Precondition("all dimensions must be at least 1".into()));
    }
    let overflow = || SemiError::Numeric(format!("parameter count overflows for n={n} m={m} r={r} k={k}"));
    let factorized = n
        .checked_add(m)
        .and_then(|s| s.checked_mul(r))
        .and_then(|s| s.checked_mul(k))
        .ok_or_else(overflow)?;
    let dense = n.checked_mul(m).and_then(|s| s.checked_mul(k)).ok_or_else(overflow)?;
    Ok(GenerationCount { factorized, dense })
}
