use super::{Graph, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn eval_scalar<F>(f: &F, x: Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.variable(x);
    let out = f(&mut g, v)?;
    let value = g.value(out)?;
    if value.numel() != 1 {
        return Err(TensorError::NotScalar(value.shape().to_vec()));
    }
    let y = value.item();
    if !y.is_finite() {
        return Err(TensorError::NonFinite { op: "check_gradients" });
    }
    Ok(y)
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences and returns the largest relative error over all
/// coordinates of `x`.
///
/// `f` must be deterministic: any dropout inside it needs a pinned seed.
pub fn check_gradients<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(TensorError::InvalidArgument {
            op: "check_gradients",
            reason: format!("eps = {eps}"),
        });
    }
    let mut g = Graph::new();
    let v = g.variable(x.clone());
    let loss = f(&mut g, v)?;
    let analytic = g
        .backward(loss)?
        .get(v)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval_scalar(&f, plus)? - eval_scalar(&f, minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        // dyadic inputs and step keep both difference quotients exact
        let x = Tensor::from_vec(vec![0.5, -1.25, 4.0]);
        let err = check_gradients(|g, v| g.sum(v), &x, 1.0 / 65536.0).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn exp_at_zero() {
        let x = Tensor::from_vec(vec![0.0]);
        let err = check_gradients(
            |g, v| {
                let e = g.exp(v)?;
                g.sum(e)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Tensor::from_vec(vec![0.0]);
        assert!(check_gradients(|g, v| g.sum(v), &x, 0.0).is_err());
    }
}
