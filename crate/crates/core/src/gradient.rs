//! Reverse-mode derivatives of scalar objectives over ψ.
//!
//! Every differentiable quantity in the pipeline has a hand-written backward
//! pass (see [`crate::experts::cnn::backward`] and
//! [`crate::experts::pl_mean_grad`]); this module fixes the common interface
//! and the finiteness checks.

use crate::error::{Error, Result};
use crate::params::{check_finite, ParamLayout, ParamVector};

pub use crate::model::mean_jacobian_row;

/// A scalar function of ψ with an exact gradient.
pub trait Objective {
    fn layout(&self) -> &ParamLayout;

    fn value(&self, psi: &ParamVector) -> Result<f64>;

    fn value_grad(&self, psi: &ParamVector) -> Result<(f64, Vec<f64>)>;
}

/// `∇_ψ f` at `psi`. Non-finite inputs or outputs are reported with the
/// offending parameter group.
pub fn grad_scalar<F: Objective + ?Sized>(f: &F, psi: &ParamVector) -> Result<Vec<f64>> {
    psi.check_finite()?;
    let (value, grad) = f.value_grad(psi)?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "objective value".into(),
        });
    }
    if grad.len() != f.layout().total_dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} gradient entries", f.layout().total_dim()),
            actual: grad.len().to_string(),
        });
    }
    check_finite(f.layout(), &grad)?;
    Ok(grad)
}
