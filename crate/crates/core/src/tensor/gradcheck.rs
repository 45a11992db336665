use super::{Precision, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over every entry.
    pub max_rel_error: f64,
    /// `(tensor index, flat entry index)` of the worst entry.
    pub worst: (usize, usize),
    pub entries: usize,
}

/// Compare `analytic` gradients of `loss` at `params` against central
/// differences `(f(θ+h) − f(θ−h)) / 2h`, entry by entry.
pub fn finite_diff_grad_check<F>(
    params: &[Tensor],
    analytic: &[Tensor],
    h: f64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::invalid(
            "finite_diff_grad_check",
            format!("step {h} outside [1e-6, 1e-4]"),
        ));
    }
    if params.len() != analytic.len() {
        return Err(Error::invalid(
            "finite_diff_grad_check",
            format!(
                "{} parameters but {} gradients",
                params.len(),
                analytic.len()
            ),
        ));
    }
    for (p, g) in params.iter().zip(analytic) {
        if p.precision() != Precision::F64 {
            return Err(Error::invalid(
                "finite_diff_grad_check",
                "requires 64-bit parameters",
            ));
        }
        if p.shape() != g.shape() {
            return Err(Error::shape("finite_diff_grad_check", p.shape(), g.shape()));
        }
    }

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        entries: 0,
    };
    for t in 0..work.len() {
        for e in 0..work[t].len() {
            let original = work[t].data()[e];
            work[t].data_mut()[e] = original + h;
            let plus = loss(&work)?;
            work[t].data_mut()[e] = original - h;
            let minus = loss(&work)?;
            work[t].data_mut()[e] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss evaluation at parameter {t} entry {e}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (analytic[t].data()[e] - numeric).abs() / numeric.abs().max(1.0);
            report.entries += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (t, e);
            }
        }
    }
    Ok(report)
}
