//! Central finite differences, used to check backward rules.

use super::Tensor;

/// Default step for central differences.
pub const STEP: f64 = 1e-5;

/// Denominator floor so that entries with vanishing gradients are compared
/// on an absolute scale instead of blowing up the relative error.
pub const FLOOR: f64 = 1e-6;

/// Central-difference gradient of `f` with respect to `inputs[which]`.
pub fn numeric_gradient<F>(mut f: F, inputs: &[Tensor], which: usize, step: f64) -> Tensor
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut work = inputs.to_vec();
    let mut grad = Tensor::zeros(inputs[which].shape());
    for i in 0..inputs[which].len() {
        let orig = work[which].data()[i];
        work[which].data_mut()[i] = orig + step;
        let plus = f(&work);
        work[which].data_mut()[i] = orig - step;
        let minus = f(&work);
        work[which].data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Largest entrywise `|a - n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
