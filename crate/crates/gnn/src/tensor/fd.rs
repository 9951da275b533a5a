//! Finite-difference gradient estimates, used only by tests and the
//! gradient-check command to validate the tape's analytic gradients.

use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// Central-difference estimate of d(loss)/d(param).
///
/// Perturbs one element of `param` at a time by `eps` in both directions
/// and calls `loss` on the perturbed copy. `loss` must be a pure function
/// of the parameter's values. Runs in the tensor's own precision; use
/// `f64` tensors for trustworthy estimates.
pub fn finite_diff_gradient<T, F>(param: &Tensor<T>, eps: f64, mut loss: F) -> Result<Tensor<T>>
where
    T: Real,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    let e = T::from_f64(eps);
    let two = T::from_f64(2.0);
    let base = param.data().to_vec();
    let mut grad = vec![T::zero(); base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += e;
        let fp = loss(&Tensor::from_vec(param.shape().to_vec(), plus)?)?;
        let mut minus = base.clone();
        minus[i] -= e;
        let fm = loss(&Tensor::from_vec(param.shape().to_vec(), minus)?)?;
        grad[i] = (fp - fm) / (two * e);
    }
    Tensor::from_vec(param.shape().to_vec(), grad)
}
