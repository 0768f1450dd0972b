//! Central finite-difference validation of analytic gradients.

use crate::error::{Error, Result};

/// Compares the analytic gradient of `f` at `params` against central finite
/// differences, parameter by parameter. `f` returns the loss value and its
/// full analytic gradient at the given point; only the loss value is used for
/// the numeric side.
///
/// Returns the maximum over parameters of
/// `|analytic - numeric| / max(1e-4, |analytic| + |numeric|)`.
///
/// The denominator floor bounds the check for near-zero gradient components,
/// where central differences of an O(1) loss at epsilon 1e-6 carry about
/// |loss| * 1e-10 of cancellation noise: such components are accepted when
/// the absolute disagreement stays below 1e-8 at the usual 1e-4 tolerance,
/// and components of any trainable magnitude are still compared relatively.
pub fn grad_check<F>(mut f: F, params: &[f64], epsilon: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    assert!(epsilon > 0.0, "epsilon must be positive");
    let (loss, analytic) = f(params)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss in grad_check".into()));
    }
    assert_eq!(analytic.len(), params.len());
    let mut point = params.to_vec();
    let mut max_err: f64 = 0.0;
    for i in 0..params.len() {
        let orig = point[i];
        point[i] = orig + epsilon;
        let (lp, _) = f(&point)?;
        point[i] = orig - epsilon;
        let (lm, _) = f(&point)?;
        point[i] = orig;
        if !lp.is_finite() || !lm.is_finite() {
            return Err(Error::NonFinite("perturbed loss in grad_check".into()));
        }
        let numeric = (lp - lm) / (2.0 * epsilon);
        let denom = (analytic[i].abs() + numeric.abs()).max(1e-4);
        max_err = max_err.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(max_err)
}
