//! Central finite differences, the reference every analytic gradient in this
//! crate is checked against.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Magnitude below which relative error falls back to absolute error.
///
/// Central differences with `h = 1e-5` carry roughly `1e-16·|f|/h` of
/// rounding noise, about `1e-11–1e-10` for the functions checked here, so
/// gradient entries smaller than this floor are compared in absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element of `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    let mut probe = x.clone();
    let grad = finite_diff_slice(
        |values| {
            probe.data_mut().copy_from_slice(values);
            f(&probe)
        },
        x.data(),
        h,
    )?;
    Tensor::new(x.dims().to_vec(), grad)
}

/// Slice form of [`finite_diff_grad`]; `x` is restored before returning.
pub fn finite_diff_slice<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::invalid(format!("step must be positive, got {h}")));
    }
    let mut point = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + h;
        let plus = f(&point);
        point[i] = orig - h;
        let minus = f(&point);
        point[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numeric(
                "finite_diff_grad",
                format!("non-finite function value when perturbing index {i}"),
            ));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// `|a − b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
