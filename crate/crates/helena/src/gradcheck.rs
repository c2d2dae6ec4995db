//! Central finite-difference gradients, the independent oracle for every
//! analytic gradient in this crate.
//!
//! [`finite_diff_grad`] only ever calls the supplied function; it shares no
//! code with the tape's backward rules, so agreement between the two is
//! meaningful evidence of correctness.

use crate::tensor::{Scalar, Tensor, TensorError};

/// Step size giving near-optimal central-difference accuracy in f64:
/// truncation error O(h^2) and roundoff O(eps/h) are both far below the
/// comparison tolerances used in tests.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative-error floor: coordinates where both gradients are smaller than
/// this are compared in absolute terms, preventing division blow-ups on
/// true-zero gradients.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// Gradient of a scalar-valued function by central differences,
/// d/dx_i f(x) ~ (f(x + h e_i) - f(x - h e_i)) / 2h, one coordinate at a time.
///
/// Returns a tensor shaped like `x`. Fails if any probe of `f` produces a
/// non-finite value.
pub fn finite_diff_grad<S, F>(mut f: F, x: &Tensor<S>, h: S) -> Result<Tensor<S>, TensorError>
where
    S: Scalar,
    F: FnMut(&Tensor<S>) -> S,
{
    let mut probe = x.clone();
    let mut grad = vec![S::zero(); x.numel()];
    let two_h = h + h;
    for (i, g) in grad.iter_mut().enumerate() {
        let original = probe.data()[i];
        probe.data_mut()[i] = original + h;
        let up = f(&probe);
        probe.data_mut()[i] = original - h;
        let down = f(&probe);
        probe.data_mut()[i] = original;
        if !up.is_finite() || !down.is_finite() {
            return Err(TensorError::NonFinite {
                context: "finite_diff_grad function evaluation",
            });
        }
        *g = (up - down) / two_h;
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Largest per-coordinate relative error between two gradients, computed in
/// f64 with the [`REL_ERR_FLOOR`] guard in the denominator.
pub fn max_rel_error<S: Scalar>(analytic: &Tensor<S>, numeric: &Tensor<S>) -> f64 {
    assert_eq!(
        analytic.shape(),
        numeric.shape(),
        "gradient comparison requires equal shapes"
    );
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric.iter()) {
        let a = a.into_f64();
        let n = n.into_f64();
        let denom = a.abs().max(n.abs()).max(REL_ERR_FLOOR);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}
