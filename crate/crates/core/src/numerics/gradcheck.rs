//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative error between a finite-difference estimate and an analytic value:
/// `|fd - analytic| / max(1e-8, |fd| + |analytic|)`.
#[inline]
pub fn rel_error(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / (fd.abs() + analytic.abs()).max(1e-8)
}

/// Checks `analytic_grad` against central finite differences of `f` at `x`,
/// coordinate by coordinate. Returns the max relative error.
pub fn finite_diff_check(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    analytic_grad: &Tensor,
    step: f64,
) -> Result<f64> {
    if x.shape() != analytic_grad.shape() {
        return Err(Error::shape(
            "finite_diff_check",
            format!("{:?}", x.shape()),
            format!("{:?}", analytic_grad.shape()),
        ));
    }
    if !f(x).is_finite() {
        return Err(Error::NonFinite("finite_diff_check f(x)"));
    }
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - step;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("finite_diff_check probe"));
        }
        let fd = (fp - fm) / (2.0 * step);
        worst = worst.max(rel_error(fd, analytic_grad.data()[i]));
    }
    Ok(worst)
}

/// Same check over a flat coordinate vector; used for parameter stores.
pub fn finite_diff_check_flat(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic_grad: &[f64],
    step: f64,
) -> Result<f64> {
    assert_eq!(x.len(), analytic_grad.len());
    let mut probe = x.to_vec();
    if !f(&probe).is_finite() {
        return Err(Error::NonFinite("finite_diff_check_flat f(x)"));
    }
    let mut worst: f64 = 0.0;
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let fp = f(&probe);
        probe[i] = orig - step;
        let fm = f(&probe);
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("finite_diff_check_flat probe"));
        }
        let fd = (fp - fm) / (2.0 * step);
        worst = worst.max(rel_error(fd, analytic_grad[i]));
    }
    Ok(worst)
}
