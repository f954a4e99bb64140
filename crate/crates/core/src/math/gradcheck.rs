use super::params::{Gradients, ParamStore};
use crate::error::{GqsError, Result};

/// Largest relative discrepancy between an analytic gradient and central
/// differences, `|analytic - numeric| / max(1, |analytic|)`.
///
/// `f` returns the function value and its analytic gradient at a point.
pub fn grad_check<F>(mut f: F, point: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(step > 0.0) {
        return Err(GqsError::InvalidArgument(format!("step {step} must be positive")));
    }
    let (value, analytic) = f(point)?;
    check_finite(value)?;
    if analytic.len() != point.len() {
        return Err(GqsError::Shape(format!(
            "gradient of length {} at a point of length {}",
            analytic.len(),
            point.len()
        )));
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = check_finite(f(&x)?.0)?;
        x[i] = orig - step;
        let minus = check_finite(f(&x)?.0)?;
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn check_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(GqsError::NonFinite(format!("function value {v}")))
    }
}

/// [`grad_check`] over every scalar of a parameter store.
pub fn grad_check_store<F>(store: &ParamStore, step: f64, mut loss: F) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<(f64, Gradients)>,
{
    let mut scratch = store.clone();
    let point = store.flatten();
    grad_check(
        |x| {
            scratch.set_flat(x)?;
            let (value, grads) = loss(&scratch)?;
            Ok((value, grads.flatten(&scratch)))
        },
        &point,
        step,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let err = grad_check(|x| Ok((x[0] * x[0], vec![2.0 * x[0]])), &[3.0], 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_is_exact() {
        let err = grad_check(|_| Ok((4.0, vec![0.0, 0.0])), &[1.0, -2.0], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let err = grad_check(|x| Ok((x[0].sin(), vec![0.0])), &[0.3], 1e-5).unwrap();
        assert!(err > 0.9);
    }

    #[test]
    fn non_finite_values_error() {
        let r = grad_check(|x| Ok((1.0 / x[0], vec![-1.0])), &[0.0], 1e-5);
        assert!(r.is_err());
        assert!(grad_check(|x| Ok((x[0], vec![1.0])), &[0.0], 0.0).is_err());
    }
}
