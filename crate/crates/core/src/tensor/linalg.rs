//! Cholesky-based inverse and log-determinant of symmetric positive
//! definite matrices.
//!
//! Inputs are symmetrized as `(A + Aᵀ)/2` before factorization, which makes
//! the log-determinant gradient `(A + jitter·I)⁻¹` exact for arbitrary
//! (not necessarily symmetric) perturbations.

use super::{GradCtx, Result, Tensor, TensorError};

/// Diagonal jitter used when none is specified.
pub const DEFAULT_JITTER: f64 = 1e-6;

fn square_dim(a: &Tensor, op: &'static str) -> Result<usize> {
    match a.shape() {
        &[r, c] if r == c => Ok(r),
        s => Err(TensorError::ShapeMismatch {
            op,
            left: s.to_vec(),
            right: s.iter().rev().copied().collect(),
        }),
    }
}

/// Lower-triangular `L` with `L·Lᵀ = sym(a) + jitter·I`, row-major `n×n`.
pub fn cholesky(a: &[f64], n: usize, jitter: f64) -> Result<Vec<f64>> {
    assert_eq!(a.len(), n * n);
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j] + jitter;
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(TensorError::NotPositiveDefinite { pivot: j });
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = 0.5 * (a[i * n + j] + a[j * n + i]);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Ok(l)
}

fn logdet_from_cholesky(l: &[f64], n: usize) -> f64 {
    (0..n).map(|i| l[i * n + i].ln()).sum::<f64>() * 2.0
}

/// `(L·Lᵀ)⁻¹ = L⁻ᵀ·L⁻¹`, symmetrized.
fn inverse_from_cholesky(l: &[f64], n: usize) -> Vec<f64> {
    // Columns of L⁻¹ by forward substitution.
    let mut linv = vec![0.0; n * n];
    for c in 0..n {
        for i in c..n {
            let mut s = if i == c { 1.0 } else { 0.0 };
            for k in c..i {
                s -= l[i * n + k] * linv[k * n + c];
            }
            linv[i * n + c] = s / l[i * n + i];
        }
    }
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for k in i..n {
                s += linv[k * n + i] * linv[k * n + j];
            }
            inv[i * n + j] = s;
            inv[j * n + i] = s;
        }
    }
    inv
}

/// Returns `(A + jitter·I)⁻¹` and `log|A + jitter·I|` as plain values.
pub fn inverse_and_logdet(a: &Tensor, jitter: f64) -> Result<(Tensor, f64)> {
    let n = square_dim(a, "inverse_and_logdet")?;
    let l = cholesky(a.data(), n, jitter)?;
    let inv = Tensor::new(inverse_from_cholesky(&l, n), &[n, n])?;
    Ok((inv, logdet_from_cholesky(&l, n)))
}

impl Tensor {
    /// Differentiable `log|A + jitter·I|` for symmetric positive
    /// (semi-)definite `A`. The gradient is `(A + jitter·I)⁻¹`.
    pub fn logdet(&self, jitter: f64) -> Result<Tensor> {
        let n = square_dim(self, "logdet")?;
        let l = cholesky(self.data(), n, jitter)?;
        let value = logdet_from_cholesky(&l, n);
        let inv = inverse_from_cholesky(&l, n);
        Tensor::from_op(
            "logdet",
            Vec::new(),
            vec![value],
            &[self],
            Box::new(move |ctx: &GradCtx| {
                let g = ctx.upstream[0];
                vec![Some(inv.iter().map(|v| g * v).collect())]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_zero_logdet() {
        let (inv, ld) = inverse_and_logdet(&Tensor::eye(5), 0.0).unwrap();
        assert_eq!(ld, 0.0);
        assert_eq!(inv.data(), Tensor::eye(5).data());
    }

    #[test]
    fn diagonal_logdet() {
        let a = Tensor::new(vec![2.0, 0.0, 0.0, 3.0], &[2, 2]).unwrap();
        let (_, ld) = inverse_and_logdet(&a, 0.0).unwrap();
        assert!((ld - 6f64.ln()).abs() < 1e-12);
        assert!((ld - 1.791_759_469_2).abs() < 1e-10);
    }

    #[test]
    fn scaled_identity() {
        for d in 1..8 {
            let c = 3.7;
            let a = Tensor::eye(d).scale(c).unwrap();
            let ld = a.logdet(0.0).unwrap().item();
            assert!((ld - d as f64 * c.ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn reports_failing_pivot() {
        let a = Tensor::new(vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0], &[3, 3]).unwrap();
        assert_eq!(
            inverse_and_logdet(&a, 0.0).unwrap_err(),
            TensorError::NotPositiveDefinite { pivot: 2 }
        );
        assert!(inverse_and_logdet(&a, 1e-6).is_ok());
        let neg = Tensor::new(vec![-1.0], &[1, 1]).unwrap();
        assert_eq!(
            neg.logdet(0.0).unwrap_err(),
            TensorError::NotPositiveDefinite { pivot: 0 }
        );
    }

    #[test]
    fn rejects_non_square() {
        assert!(Tensor::zeros(&[2, 3]).logdet(0.0).is_err());
    }
}
