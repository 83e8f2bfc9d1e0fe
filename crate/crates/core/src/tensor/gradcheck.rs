//! Finite-difference gradient oracle.
//!
//! Central differences in `f64` are the reference every tape backward rule
//! is checked against. `f32` finite differences are unreliable, so callers
//! are expected to instantiate their graphs at `f64` for checking.

use super::{Scalar, Tensor};

/// Central-difference gradient estimate of a scalar function:
/// (f(x + eps*e_i) - f(x - eps*e_i)) / (2 eps), per coordinate.
///
/// `f` must be pure; `eps` defaults to 1e-5 at the call sites that check
/// against the tape.
pub fn finite_diff_grad<S: Scalar>(
    f: impl Fn(&Tensor<S>) -> f64,
    x: &Tensor<S>,
    eps: f64,
) -> Tensor<S> {
    let mut grad = vec![S::zero(); x.numel()];
    let mut probe = x.clone();
    let e = S::from_f64(eps);
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + e;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - e;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad[i] = S::from_f64((plus - minus) / (2.0 * eps));
    }
    Tensor::new(x.shape().to_vec(), grad).expect("gradient matches input shape")
}

/// Relative error with a small floor so near-zero gradients compare in
/// absolute terms: |a - b| / max(|a|, |b|, 1e-3).
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Maximum elementwise [`rel_error`] across two gradient buffers.
pub fn max_rel_error<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| rel_error(x.to_f64(), y.to_f64()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_of_sum_is_all_ones() {
        let x = Tensor::<f64>::from_f64_slice(&[4], &[0.3, -1.2, 2.0, 0.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().sum(), &x, 1e-5);
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn fd_of_square_at_three_is_six() {
        let x = Tensor::<f64>::scalar(3.0);
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &x, 1e-5);
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }
}
