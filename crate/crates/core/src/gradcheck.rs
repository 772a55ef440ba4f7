//! Central finite differences, used as an independent check on the tape.

use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function at `x`:
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element `i`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Tensor
where
    F: Fn(&Tensor) -> f64,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad).expect("shape preserved")
}

/// Largest elementwise gap between `analytic` and `numeric`, relative to the
/// larger of the two gradients' max norms.
///
/// Normalizing by the group scale rather than per element keeps entries whose
/// true gradient is near zero from reporting roundoff as a large error.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        .max(1e-10);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::vector(vec![0.3, -2.0, 7.5]);
        let g = finite_diff_grad(|t| t.data().iter().sum(), &x, 1e-5);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &x, 1e-5);
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_is_scale_free() {
        assert_eq!(relative_error(&[2.0, 0.0], &[2.0, 0.0]), 0.0);
        let e = relative_error(&[1.0, 1e-12], &[1.0, 0.0]);
        assert!(e < 1e-11);
        assert!((relative_error(&[1.0], &[2.0]) - 0.5).abs() < 1e-15);
    }
}
