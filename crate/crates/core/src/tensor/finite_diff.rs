//! Central finite-difference gradient estimation for black-box scalar
//! functions. Accumulation runs in f64 to protect against cancellation.

use super::Tensor;
use crate::error::{Error, Result};

/// Estimate the gradient of `f` at `x` by central differences:
/// component `i` is `(f(x + h·e_i) − f(x − h·e_i)) / (2h)`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, h: f32) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f32,
{
    if !(h > 0.0) {
        return Err(Error::invalid_argument(format!(
            "finite difference step must be positive, got {h}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0f32; x.numel()];
    for i in 0..x.numel() {
        let orig = x.data()[i];

        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;

        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numeric(format!(
                "function returned non-finite value probing coordinate {i}"
            )));
        }
        grad[i] = ((plus as f64 - minus as f64) / (2.0 * h as f64)) as f32;
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), grad))
}
