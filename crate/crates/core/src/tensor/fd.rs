use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function.
///
/// Evaluates `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element. The
/// function is treated as a black box; no tape state is consulted.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid("finite_diff_grad", format!("step {h} must be positive")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::NonFinite(format!("finite-difference probe at element {i}")));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Tensor-level relative error `max|a − b| / max(max|a|, max|b|)`.
///
/// Normalizing by the tensor's scale keeps near-zero entries from dominating.
/// Two all-zero tensors have error 0.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.max_abs_diff(b);
    let scale = a.max_abs().max(b.max_abs());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
