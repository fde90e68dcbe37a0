use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Central-difference gradient `(f(x + εeᵢ) − f(x − εeᵢ)) / 2ε` for every coordinate.
pub fn finite_difference_gradient<T, F>(mut f: F, x: &Tensor<T>, eps: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if !(eps > T::zero()) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!("objective is not finite around coordinate {i}")));
        }
        grad.push((up - down) / (eps + eps));
    }
    Tensor::from_vec(x.shape(), grad)
}

/// Largest `|a − b| / max(|a|, |b|, floor)` over paired entries.
pub fn max_relative_error<T: Scalar>(a: &[T], b: &[T], floor: T) -> T {
    a.iter()
        .zip(b)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(T::zero(), T::max)
}
