//! Haar-distributed orthogonal matrices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{dot, DenseMatrix};
use crate::error::{Result, SemiError};

/// A square orthogonal matrix together with the seed that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsometricTransform {
    pub q: DenseMatrix,
    pub dim: usize,
    pub seed: u64,
}

impl IsometricTransform {
    /// Deterministic Haar draw for a given seed.
    pub fn from_seed(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(SemiError::Config("orthogonal matrix of dimension 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DenseMatrix::randn(dim, dim, 1.0, &mut rng);
        let q = haar_from_gaussian(&g);
        Ok(Self { q, dim, seed })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            q: DenseMatrix::identity(dim),
            dim,
            seed: 0,
        }
    }

    /// `Q x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim).map(|i| dot(self.q.row(i), x)).collect()
    }

    /// Applies `Q` to every row of `x` (i.e. returns `x Q^T`).
    pub fn apply_rows(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        x.matmul_t(&self.q)
    }
}

/// Draws `Q ~ Haar(O(dim))`: QR of a standard Gaussian matrix with each
/// column of `Q` multiplied by the sign of the matching diagonal entry of `R`.
pub fn sample_haar_orthogonal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<IsometricTransform> {
    let seed = rng.random::<u64>();
    IsometricTransform::from_seed(dim, seed)
}

fn haar_from_gaussian(g: &DenseMatrix) -> DenseMatrix {
    let (q, r_diag) = householder_qr(g);
    let n = g.rows();
    DenseMatrix::from_fn(n, n, |i, j| {
        let s = if r_diag[j] < 0.0 { -1.0 } else { 1.0 };
        q.get(i, j) * s
    })
}

/// Householder QR of a square matrix. Returns the full orthogonal factor and
/// the diagonal of `R`.
pub fn householder_qr(a: &DenseMatrix) -> (DenseMatrix, Vec<f64>) {
    let n = a.rows();
    assert_eq!(n, a.cols(), "householder_qr expects a square matrix");
    let mut r = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let x: Vec<f64> = (k..n).map(|i| r.get(i, k)).collect();
        let norm_x = dot(&x, &x).sqrt();
        if norm_x == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        let alpha = if x[0] >= 0.0 { -norm_x } else { norm_x };
        let mut v = x;
        v[0] -= alpha;
        let vn = dot(&v, &v).sqrt();
        if vn == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        v.iter_mut().for_each(|e| *e /= vn);
        for j in k..n {
            let proj: f64 = (k..n).map(|i| v[i - k] * r.get(i, j)).sum();
            for i in k..n {
                let val = r.get(i, j) - 2.0 * v[i - k] * proj;
                r.set(i, j, val);
            }
        }
        reflectors.push(v);
    }
    let mut q = DenseMatrix::identity(n);
    for k in (0..n).rev() {
        let v = &reflectors[k];
        if v.is_empty() {
            continue;
        }
        for j in 0..n {
            let proj: f64 = (k..n).map(|i| v[i - k] * q.get(i, j)).sum();
            for i in k..n {
                let val = q.get(i, j) - 2.0 * v[i - k] * proj;
                q.set(i, j, val);
            }
        }
    }
    let diag = (0..n).map(|i| r.get(i, i)).collect();
    (q, diag)
}
