//! Slow reference computations used to check the fast paths in tests.
//!
//! Nothing here is used by the estimation pipeline itself.

use crate::error::Result;
use crate::params::ParamVector;

/// Central finite differences of `f` at `psi`, with per-coordinate steps.
pub fn central_differences<F>(f: F, psi: &ParamVector, steps: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(&ParamVector) -> Result<f64>,
{
    let mut x = psi.clone();
    let mut out = Vec::with_capacity(psi.len());
    for (k, &h) in steps.iter().enumerate() {
        let orig = x.as_slice()[k];
        x.as_mut_slice()[k] = orig + h;
        let up = f(&x)?;
        x.as_mut_slice()[k] = orig - h;
        let down = f(&x)?;
        x.as_mut_slice()[k] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Relative error with an absolute floor: `|a − b| / max(|a|, |b|)` unless
/// `|a − b| <= floor`, in which case 0.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let diff = (a - b).abs();
    if diff <= floor {
        0.0
    } else {
        diff / a.abs().max(b.abs())
    }
}
