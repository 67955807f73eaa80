//! Central finite-difference gradient checking.

use crate::autograd::{Tape, Var};
use crate::error::{CerdError, Result};
use crate::tensor::Tensor;

/// Below this magnitude a gradient entry is compared in absolute terms.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn from_pairs(analytic: Vec<f64>, numeric: Vec<f64>, tolerance: f64) -> Self {
        let rel_errors: Vec<f64> = analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| relative_error(a, n))
            .collect();
        let max_rel_error = rel_errors.iter().cloned().fold(0.0, f64::max);
        GradCheckReport {
            analytic,
            numeric,
            rel_errors,
            max_rel_error,
            tolerance,
            passed: max_rel_error < tolerance,
        }
    }
}

/// `|a - n| / max(|a|, |n|, ABS_FLOOR)`; zero when both vanish.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

pub fn check_step(step: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&step) {
        return Err(CerdError::Parameter(format!(
            "finite-difference step must lie in [1e-7, 1e-3], got {step}"
        )));
    }
    Ok(())
}

/// Central differences of a scalar function of `x`, perturbing each coordinate in place.
pub fn central_differences(
    x: &mut [f64],
    step: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(x)?;
        x[i] = orig - step;
        let minus = f(x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(CerdError::Evaluation(format!(
                "non-finite function value while perturbing coordinate {i}"
            )));
        }
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// Compares the tape gradient of scalar `f` at `x` with central differences.
pub fn check_gradients<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_step(step)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xv)?;
    let value = tape.value(y).item();
    if !value.is_finite() || tape.value(y).numel() != 1 {
        return Err(CerdError::Evaluation(format!(
            "function must be finite and scalar at x, got {:?}",
            tape.value(y).data()
        )));
    }
    tape.backward(y)?;
    let analytic = tape
        .grad(xv)
        .map(Tensor::into_data)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let shape = x.shape().to_vec();
    let mut coords = x.data().to_vec();
    let numeric = central_differences(&mut coords, step, |c| {
        let mut t = Tape::new();
        let v = t.leaf(Tensor::new(shape.clone(), c.to_vec())?, true);
        let y = f(&mut t, v)?;
        Ok(t.value(y).item())
    })?;
    Ok(GradCheckReport::from_pairs(analytic, numeric, tol))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_gradient() {
        // f(x) = xᵀ A x with non-symmetric A; analytic gradient (A + Aᵀ) x
        let a = Tensor::matrix(3, 3, vec![2., 1., 0., -1., 3., 0.5, 0.25, 0., 1.]).unwrap();
        let x = Tensor::matrix(3, 1, vec![0.3, -1.2, 2.0]).unwrap();
        let report = check_gradients(
            |t, x| {
                let av = t.constant(a.clone());
                let ax = t.matmul(av, x)?;
                let p = t.mul(x, ax)?;
                Ok(t.sum_all(p))
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "max rel error {}", report.max_rel_error);
        let expected = [
            (2. + 2.) * 0.3 + (1. - 1.) * -1.2 + (0. + 0.25) * 2.0,
            (-1. + 1.) * 0.3 + 6. * -1.2 + (0.5 + 0.) * 2.0,
            (0.25 + 0.) * 0.3 + (0. + 0.5) * -1.2 + 2. * 2.0,
        ];
        for (g, e) in report.analytic.iter().zip(expected) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::vector(vec![1.0, -2.0]).unwrap();
        let report = check_gradients(
            |t, x| {
                let z = t.scale(x, 0.0);
                let c = t.constant(Tensor::scalar(4.0));
                let s = t.sum_all(z);
                t.add(s, c)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.analytic.iter().all(|&g| g == 0.0));
        assert!(report.numeric.iter().all(|&g| g == 0.0));
        assert!(report.passed);
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let x = Tensor::vector(vec![1.0]).unwrap();
        assert!(matches!(
            check_gradients(|t, x| Ok(t.sum_all(x)), &x, 1e-2, 1e-4),
            Err(CerdError::Parameter(_))
        ));
        let nan = Tensor::vector(vec![f64::NAN]).unwrap();
        assert!(matches!(
            check_gradients(|t, x| Ok(t.sum_all(x)), &nan, 1e-5, 1e-4),
            Err(CerdError::Evaluation(_))
        ));
    }
}
