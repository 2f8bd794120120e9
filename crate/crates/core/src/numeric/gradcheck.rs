//! Central finite-difference verification of analytic gradients.

use super::matrix::Matrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Floor on the relative-error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the coordinate with the largest relative error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares `analytic` against `(f(θ+εe) − f(θ−εe)) / 2ε` coordinate by
/// coordinate. Relative error uses `max(|analytic|, |numeric|, 1e-8)` as the
/// denominator.
pub fn finite_diff_check<T, F>(
    f: F,
    theta: &Matrix<T>,
    analytic: &Matrix<T>,
    eps: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&Matrix<T>) -> Result<T>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Parameter(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    theta.same_shape(analytic, "finite_diff_check")?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = theta.clone();
    let step = T::lit(eps);
    for i in 0..theta.len() {
        let original = probe.as_slice()[i];
        probe.as_mut_slice()[i] = original + step;
        let plus = eval(&f, &probe, i, "+")?;
        probe.as_mut_slice()[i] = original - step;
        let minus = eval(&f, &probe, i, "-")?;
        probe.as_mut_slice()[i] = original;

        let numeric = (plus - minus) / (2.0 * eps);
        let exact = analytic.as_slice()[i].as_f64();
        let denom = exact.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        let rel = (exact - numeric).abs() / denom;
        if rel > report.max_rel_error || !rel.is_finite() {
            report = GradCheckReport {
                max_rel_error: rel,
                worst_index: i,
                analytic: exact,
                numeric,
            };
        }
    }
    Ok(report)
}

fn eval<T: Scalar, F: Fn(&Matrix<T>) -> Result<T>>(
    f: &F,
    theta: &Matrix<T>,
    i: usize,
    side: &str,
) -> Result<f64> {
    let v = f(theta)?.as_f64();
    if !v.is_finite() {
        return Err(Error::Evaluation(format!(
            "objective is {v} at coordinate {i} ({side} step)"
        )));
    }
    Ok(v)
}
