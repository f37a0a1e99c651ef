//! Reducing encoder outputs wider than the projector input: Infinite
//! Feature Selection, PCA, and numerical rank.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SemiError};
use crate::numerics::DenseMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    InfFs,
    Pca,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfFsScores {
    pub scores: Vec<f64>,
    /// The `gamma` actually used after the spectral check.
    pub gamma: f64,
    pub spectral_radius: f64,
}

/// Inf-FS feature adjacency: `beta * max(sigma_i, sigma_j) + (1 - beta) *
/// |corr(f_i, f_j)|`, with `sigma` the standard deviation of the min-max
/// normalised feature. Constant features have zero correlation.
pub fn inffs_adjacency(x: &DenseMatrix, beta: f64) -> Result<DenseMatrix> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(SemiError::Precondition("Inf-FS needs at least two samples".into()));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(SemiError::Precondition(format!("beta {beta} outside (0, 1)")));
    }
    let cols: Vec<Vec<f64>> = (0..d).map(|j| x.column(j)).collect();
    let mut sigma = Vec::with_capacity(d);
    let mut centered = Vec::with_capacity(d);
    for c in &cols {
        let lo = c.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        let norm: Vec<f64> = if range > 0.0 {
            c.iter().map(|v| (v - lo) / range).collect()
        } else {
            vec![0.0; n]
        };
        let mean = norm.iter().sum::<f64>() / n as f64;
        sigma.push((norm.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
        let m = c.iter().sum::<f64>() / n as f64;
        centered.push(c.iter().map(|v| v - m).collect::<Vec<f64>>());
    }
    let norms: Vec<f64> = centered.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    Ok(DenseMatrix::from_fn(d, d, |i, j| {
        let corr = if norms[i] > 0.0 && norms[j] > 0.0 {
            let dot: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            (dot / (norms[i] * norms[j])).abs().min(1.0)
        } else {
            0.0
        };
        beta * sigma[i].max(sigma[j]) + (1.0 - beta) * corr
    }))
}

fn spectral_radius(a: &DenseMatrix) -> f64 {
    let eig = SymmetricEigen::new(a.to_nalgebra());
    eig.eigenvalues.iter().fold(0.0, |m: f64, v| m.max(v.abs()))
}

/// Inf-FS scores `s_i = sum_j [(I - gamma A)^-1 - I]_ij`. `gamma = None`
/// uses `0.9 / rho(A)`; a supplied gamma with `gamma * rho >= 1` is
/// replaced by that default.
pub fn inffs_scores(x: &DenseMatrix, gamma: Option<f64>, beta: f64) -> Result<InfFsScores> {
    let a = inffs_adjacency(x, beta)?;
    let d = a.rows();
    let rho = spectral_radius(&a);
    if rho == 0.0 {
        return Ok(InfFsScores {
            scores: vec![0.0; d],
            gamma: gamma.unwrap_or(0.0),
            spectral_radius: 0.0,
        });
    }
    let gamma = match gamma {
        Some(g) if g > 0.0 && g * rho < 1.0 => g,
        Some(g) if g <= 0.0 => return Err(SemiError::Precondition(format!("gamma {g} must be positive"))),
        _ => 0.9 / rho,
    };
    let m = DMatrix::<f64>::identity(d, d) - a.to_nalgebra() * gamma;
    let inv = m
        .try_inverse()
        .ok_or_else(|| SemiError::Numeric("I - gamma A is singular".into()))?;
    let s = inv - DMatrix::<f64>::identity(d, d);
    let scores: Vec<f64> = (0..d).map(|i| s.row(i).sum()).collect();
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(SemiError::Numeric("non-finite Inf-FS scores".into()));
    }
    Ok(InfFsScores {
        scores,
        gamma,
        spectral_radius: rho,
    })
}

/// Indices of the `k` largest scores, in descending score order; ties go
/// to the lower index.
pub fn select_top(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(SemiError::Precondition(format!("cannot select {k} of {} features", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Column means and the top-`k` right singular directions `[d x k]` of the
/// column-centered `x`. Each direction's largest-magnitude entry is made
/// positive.
pub fn pca_reduce(x: &DenseMatrix, k: usize) -> Result<(Vec<f64>, DenseMatrix)> {
    let (n, d) = x.shape();
    if k > d || k == 0 {
        return Err(SemiError::Precondition(format!("PCA to {k} of {d} dimensions")));
    }
    let means: Vec<f64> = (0..d).map(|j| x.column(j).iter().sum::<f64>() / n.max(1) as f64).collect();
    let cov = x.center_columns().t_matmul(&x.center_columns())?;
    let eig = SymmetricEigen::new(cov.to_nalgebra());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut basis = DenseMatrix::zeros(d, k);
    for (c, &o) in order.iter().take(k).enumerate() {
        let v = eig.eigenvectors.column(o);
        let pivot = v.iter().cloned().fold(0.0f64, |m, e| if e.abs() > m.abs() { e } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for r in 0..d {
            basis.set(r, c, sign * v[r]);
        }
    }
    Ok((means, basis))
}

/// Number of singular values above `tol * sigma_max`.
pub fn embedding_rank(x: &DenseMatrix, tol: f64) -> Result<usize> {
    if tol <= 0.0 {
        return Err(SemiError::Precondition("rank tolerance must be positive".into()));
    }
    if x.is_empty() {
        return Ok(0);
    }
    let sv = x.to_nalgebra().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > tol * max).count())
}

/// A fitted reduction from `d_e` encoder features to `k` projector inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSelection {
    pub method: SelectionMethod,
    /// Selected feature indices (Inf-FS), in descending score order.
    pub indices: Vec<usize>,
    /// Scores per input feature (Inf-FS) or explained variance per
    /// component (PCA).
    pub scores: Vec<f64>,
    pub means: Vec<f64>,
    pub basis: Option<DenseMatrix>,
    pub fit_samples: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub gamma: f64,
    pub beta: f64,
}

impl FeatureSelection {
    pub fn fit_inffs(x: &DenseMatrix, k: usize, beta: f64) -> Result<Self> {
        let s = inffs_scores(x, None, beta)?;
        let indices = select_top(&s.scores, k)?;
        Ok(Self {
            method: SelectionMethod::InfFs,
            indices,
            scores: s.scores,
            means: Vec::new(),
            basis: None,
            fit_samples: x.rows(),
            input_dim: x.cols(),
            output_dim: k,
            gamma: s.gamma,
            beta,
        })
    }

    pub fn fit_pca(x: &DenseMatrix, k: usize) -> Result<Self> {
        let (means, basis) = pca_reduce(x, k)?;
        let projected = x.center_columns().matmul(&basis)?;
        let scores = (0..k).map(|j| projected.column(j).iter().map(|v| v * v).sum()).collect();
        Ok(Self {
            method: SelectionMethod::Pca,
            indices: Vec::new(),
            scores,
            means,
            basis: Some(basis),
            fit_samples: x.rows(),
            input_dim: x.cols(),
            output_dim: k,
            gamma: 0.0,
            beta: 0.0,
        })
    }

    pub fn fit(method: SelectionMethod, x: &DenseMatrix, k: usize, beta: f64) -> Result<Self> {
        match method {
            SelectionMethod::InfFs => Self::fit_inffs(x, k, beta),
            SelectionMethod::Pca => Self::fit_pca(x, k),
        }
    }

    /// Maps `[n x d_e]` rows to `[n x k]`.
    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.cols() != self.input_dim {
            return Err(SemiError::Shape(format!(
                "selection fitted on {} features, got {}",
                self.input_dim,
                x.cols()
            )));
        }
        match self.method {
            SelectionMethod::InfFs => x.select_columns(&self.indices),
            SelectionMethod::Pca => {
                let mut c = x.clone();
                for i in 0..c.rows() {
                    for (v, m) in c.row_mut(i).iter_mut().zip(&self.means) {
                        *v -= m;
                    }
                }
                c.matmul(self.basis.as_ref().expect("PCA basis"))
            }
        }
    }

    pub fn apply_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.apply(&DenseMatrix::row_vector(x))?.into_data())
    }
}
