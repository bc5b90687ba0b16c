//! Finite-difference gradient checking, the oracle behind the gradient suites.
//!
//! Analytic gradients are compared against central differences at 64-bit
//! precision. The error measure is the worst per-component relative error
//! with an absolute floor of 1 in the denominator, so tiny gradients are
//! compared absolutely instead of amplifying noise.

use crate::tensor::Tensor;

/// Step size used by [`check_gradient`]. With central differences at 64-bit
/// precision this puts truncation and roundoff error both well below the
/// 1e-4 acceptance threshold the test suites use.
pub const DEFAULT_STEP: f64 = 1e-3;

/// Central-difference gradient of a scalar function at `point`.
///
/// Perturbs one component at a time: `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h`.
pub fn finite_difference_gradient<F>(f: &mut F, point: &Tensor<f64>, h: f64) -> Tensor<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let mut grad = Tensor::zeros(point.shape().to_vec());
    let mut probe = point.clone();
    for i in 0..probe.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Worst per-component `|a − n| / max(|a|, |n|, 1)` over the two gradients.
pub fn max_relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    assert_eq!(
        analytic.shape(),
        numeric.shape(),
        "gradient shapes must agree to be comparable"
    );
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Convenience wrapper: finite differences at [`DEFAULT_STEP`] vs. the given
/// analytic gradient; returns the worst relative error.
pub fn check_gradient<F>(f: &mut F, point: &Tensor<f64>, analytic: &Tensor<f64>) -> f64
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let numeric = finite_difference_gradient(f, point, DEFAULT_STEP);
    max_relative_error(analytic, &numeric)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{kernels, Pcg32};

    #[test]
    fn quadratic_gradient_is_tight() {
        let point = Tensor::scalar(3.0);
        let analytic = Tensor::scalar(6.0);
        let err = check_gradient(&mut |x: &Tensor<f64>| x.item() * x.item(), &point, &analytic);
        assert!(err < 1e-8, "error {err}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let point = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let grad = finite_difference_gradient(&mut |_| 4.2, &point, DEFAULT_STEP);
        assert_eq!(grad.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_cross_entropy_passes_check() {
        let mut rng = Pcg32::new(123, 0);
        let labels = vec![2usize, 0, 4];
        let point = Tensor::rand_uniform(vec![3, 5], 2.0, &mut rng);
        let got = kernels::softmax_cross_entropy(&point, &labels).unwrap();
        let analytic = kernels::softmax_cross_entropy_backward(&got.probs, &labels, 1.0);
        let err = check_gradient(
            &mut |x: &Tensor<f64>| kernels::softmax_cross_entropy(x, &labels).unwrap().loss,
            &point,
            &analytic,
        );
        assert!(err <= 1e-4, "error {err}");
    }
}
