use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central finite-difference gradient of a scalar function, in 64-bit.
pub fn finite_difference_gradient<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>>
where
    F: Fn(&Tensor<f64>) -> f64,
{
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.dims().to_vec());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at coordinate {i} (f+ = {plus}, f- = {minus})"
            )));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Max-norm relative error `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`, floored so that two
/// all-zero gradients compare equal.
pub fn relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    let diff = analytic.max_abs_diff(numeric);
    let scale = analytic
        .data()
        .iter()
        .chain(numeric.data())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    diff / scale.max(1e-8)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub per_parameter_errors: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Compares named analytic/numeric gradient pairs.
pub fn compare_gradients<'a>(
    pairs: impl IntoIterator<Item = (&'a str, &'a Tensor<f64>, &'a Tensor<f64>)>,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    for (name, analytic, numeric) in pairs {
        let err = relative_error(analytic, numeric);
        report.max_relative_error = report.max_relative_error.max(err);
        report.per_parameter_errors.push((name.to_string(), err));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let x = Tensor::new([1], vec![3.0]).unwrap();
        let g = finite_difference_gradient(|x| x.data()[0] * x.data()[0], &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_fn([5], |i| i as f64 * 0.7 - 1.0);
        let g = finite_difference_gradient(|x| x.sum(), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn non_finite_objective_names_coordinate() {
        let x = Tensor::new([3], vec![1.0, 5e-4, 2.0]).unwrap();
        let err = finite_difference_gradient(|x| x.data().iter().map(|v| v.sqrt()).sum(), &x, 1e-3)
            .unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "{err}");
    }

    #[test]
    fn report_tracks_worst_parameter() {
        let a = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new([2], vec![1.0, 2.2]).unwrap();
        let r = compare_gradients([("w", &a, &a), ("b", &a, &b)]);
        assert_eq!(r.per_parameter_errors[0].1, 0.0);
        assert!((r.max_relative_error - 0.2 / 2.2).abs() < 1e-12);
        assert!(!r.passes(1e-3));
    }
}
