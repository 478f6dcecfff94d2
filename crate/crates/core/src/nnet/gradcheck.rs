//! Central finite differences, the reference for every analytic gradient.

use crate::error::{Error, Result};
use crate::nnet::model::{ModelParams, ParamGrads};

pub const DEFAULT_STEP: f64 = 1e-6;

/// Entries whose magnitude is below this are compared on an absolute
/// scale, where finite differences are dominated by rounding.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

/// `(f(x + h e_i) − f(x − h e_i)) / 2h` for every coordinate.
pub fn finite_difference<F>(mut f: F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&probe)?;
        probe[i] = orig - step;
        let down = f(&probe)?;
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("loss while probing coordinate {i}")));
        }
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// Numeric gradient of `loss` with respect to every model parameter.
pub fn finite_difference_grad<F>(mut loss: F, params: &ModelParams, step: f64) -> Result<ParamGrads>
where
    F: FnMut(&ModelParams) -> Result<f64>,
{
    let mut probe = params.clone();
    let flat = finite_difference(
        |x| {
            probe.set_flat(x);
            loss(&probe)
        },
        &params.to_flat(),
        step,
    )?;
    let mut grads = params.clone();
    grads.set_flat(&flat);
    Ok(grads)
}

/// `max_i |a_i − b_i| / max(|a_i|, |b_i|, RELATIVE_ERROR_FLOOR)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_ERROR_FLOOR))
        .fold(0.0, f64::max)
}
