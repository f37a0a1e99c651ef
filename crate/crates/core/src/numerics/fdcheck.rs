use super::params::Params;
use crate::error::{Result, SemiError};

/// Compares analytic gradients against central finite differences.
///
/// `loss_and_grad` evaluates the loss at a parameter point and returns the
/// analytic gradient alongside it; the gradient is only read at the
/// unperturbed point. Returns the maximum over all coordinates of
/// `|g_fd - g| / max(1, |g_fd|, |g|)`.
pub fn finite_diff_check<F>(params: &Params, epsilon: f64, mut loss_and_grad: F) -> Result<f64>
where
    F: FnMut(&Params) -> Result<(f64, Params)>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(SemiError::Config(format!(
            "finite-difference step {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let (base, analytic) = loss_and_grad(params)?;
    if !base.is_finite() {
        return Err(SemiError::Numeric("non-finite loss at base point".into()));
    }
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (name, value) in params.iter() {
        let grad = analytic.get(name)?;
        if grad.shape() != value.shape() {
            return Err(SemiError::Shape(format!("gradient for {name} has wrong shape")));
        }
        for k in 0..value.len() {
            let orig = value.data()[k];
            probe.get_mut(name)?.data_mut()[k] = orig + epsilon;
            let (plus, _) = loss_and_grad(&probe)?;
            probe.get_mut(name)?.data_mut()[k] = orig - epsilon;
            let (minus, _) = loss_and_grad(&probe)?;
            probe.get_mut(name)?.data_mut()[k] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(SemiError::Numeric(format!("non-finite loss probing {name}[{k}]")));
            }
            let fd = (plus - minus) / (2.0 * epsilon);
            let g = grad.data()[k];
            let rel = (fd - g).abs() / 1f64.max(fd.abs()).max(g.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matrix::DenseMatrix;

    #[test]
    fn linear_loss_is_exact() {
        let x = [0.3, -1.2, 2.0, 0.7];
        let mut p = Params::new();
        p.insert("w", DenseMatrix::row_vector(&[1.0, 2.0, -0.5, 0.1]));
        let err = finite_diff_check(&p, 1e-5, |p| {
            let w = p.get("w")?;
            let loss = w.data().iter().zip(&x).map(|(a, b)| a * b).sum();
            let mut g = Params::new();
            g.insert("w", DenseMatrix::row_vector(&x));
            Ok((loss, g))
        })
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn epsilon_range_enforced() {
        let p = Params::new();
        assert!(finite_diff_check(&p, 1e-2, |_| Ok((0.0, Params::new()))).is_err());
    }

    #[test]
    fn non_finite_loss_reported() {
        let mut p = Params::new();
        p.insert("w", DenseMatrix::zeros(1, 1));
        let err = finite_diff_check(&p, 1e-5, |_| Ok((f64::NAN, Params::new()))).unwrap_err();
        assert!(matches!(err, SemiError::Numeric(_)));
    }
}
