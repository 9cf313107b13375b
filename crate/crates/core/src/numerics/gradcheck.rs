/// Compares an analytic gradient against central differences
/// `(f(w+h) - f(w-h)) / 2h` coordinate by coordinate.
///
/// Returns the largest relative error, using
/// `max(|analytic|, |numeric|, 1e-8)` as the denominator.
pub fn finite_difference_check<F>(mut f: F, params: &[f64], analytic: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    let mut w = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..w.len() {
        let orig = w[i];
        w[i] = orig + h;
        let plus = f(&w);
        w[i] = orig - h;
        let minus = f(&w);
        w[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::special::{sigmoid, softplus};

    #[test]
    fn quadratic_at_three() {
        let err = finite_difference_check(|w| w[0] * w[0], &[3.0], &[6.0], 1e-5);
        assert!(err < 1e-6);
    }

    #[test]
    fn softplus_derivative_is_sigmoid() {
        let analytic = sigmoid(1.0);
        assert!((analytic - 0.731_058_578_630_004_9).abs() < 1e-12);
        let err = finite_difference_check(|w| softplus(w[0]), &[1.0], &[analytic], 1e-5);
        assert!(err < 1e-6);
    }

    #[test]
    fn detects_wrong_gradient() {
        let err = finite_difference_check(|w| w[0] * w[0], &[3.0], &[5.0], 1e-5);
        assert!(err > 0.1);
    }
}
