//! Central finite-difference gradient checking.

use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max relative error per input tensor, in input order.
    pub max_rel_error: Vec<f64>,
    pub eps: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

/// Compare reverse-mode gradients of a scalar function against
/// `(f(x+eps) − f(x−eps)) / (2·eps)` for every coordinate of every input.
///
/// Relative error is `|analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    assert!(eps > 0.0, "eps must be positive");
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.leaf(true)).collect();
    let out = f(&leaves)?;
    if !out.item().is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    out.backward()?;

    let eval = |values: &[Tensor]| -> Result<f64> {
        let v = f(values)?.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TensorError::NonFinite { op: "grad_check" })
        }
    };

    let mut max_rel_error = Vec::with_capacity(inputs.len());
    for (idx, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let mut worst: f64 = 0.0;
        for k in 0..leaf.numel() {
            let shifted = |delta: f64| -> Result<Vec<Tensor>> {
                let mut vals: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
                let mut data = inputs[idx].to_vec();
                data[k] += delta;
                vals[idx] = Tensor::new(data, inputs[idx].shape())?;
                Ok(vals)
            };
            let numeric = (eval(&shifted(eps)?)? - eval(&shifted(-eps)?)?) / (2.0 * eps);
            let a = analytic[k];
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max((a - numeric).abs() / denom);
        }
        max_rel_error.push(worst);
    }
    let passed = max_rel_error.iter().all(|&e| e < tol);
    Ok(GradCheckReport {
        max_rel_error,
        eps,
        tol,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(vec![0.3, -1.2, 2.5, 4.0], &[2, 2]).unwrap();
        let r = grad_check(|v| Ok(v[0].sum_all()), &[x], 1e-5, 1e-8).unwrap();
        assert!(r.passed);
        assert!(r.worst() < 1e-9);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let x = Tensor::new(vec![1.0], &[1]).unwrap();
        let r = grad_check(
            |v| v[0].scale(1e308)?.scale(10.0).map(|t| t.sum_all()),
            &[x],
            1e-5,
            1e-4,
        );
        assert!(r.is_err());
    }

    #[test]
    fn detects_wrong_gradient() {
        // stop-gradient through detach makes the analytic gradient zero
        let x = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let r = grad_check(
            |v| Ok(v[0].detach().square()?.sum_all().add(&v[0].sum_all())?),
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed);
    }
}
