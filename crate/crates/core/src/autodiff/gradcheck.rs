use crate::error::{Error, Result};

/// Default central-difference step for f64.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Relative error below which a gradient passes.
pub const PASS_TOLERANCE: f64 = 1e-6;
/// Relative error below which a gradient only warns.
pub const WARN_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Warn,
    Fail,
}

impl Verdict {
    pub fn from_error(err: f64) -> Self {
        if err < PASS_TOLERANCE {
            Verdict::Pass
        } else if err < WARN_TOLERANCE {
            Verdict::Warn
        } else {
            Verdict::Fail
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub max_relative_error: f64,
    /// Coordinate where the maximum was attained.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl CheckReport {
    pub fn verdict(&self) -> Verdict {
        Verdict::from_error(self.max_relative_error)
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `f` around `params`.
pub fn finite_difference_check<F>(mut f: F, params: &[f64], analytic: &[f64], h: f64) -> Result<CheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::arg(format!("finite-difference step must be positive, got {h}")));
    }
    if params.len() != analytic.len() {
        return Err(Error::dim("finite_difference_check", params.len(), analytic.len()));
    }
    let mut point = params.to_vec();
    let mut report = CheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: 0.0,
    };
    for i in 0..params.len() {
        let orig = point[i];
        point[i] = orig + h;
        let plus = f(&point)?;
        point[i] = orig - h;
        let minus = f(&point)?;
        point[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "objective is non-finite when perturbing coordinate {i} (f(+h) = {plus}, f(-h) = {minus})"
            )));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_relative_error || i == 0 {
            report = CheckReport {
                max_relative_error: err.max(report.max_relative_error),
                worst_index: i,
                analytic: analytic[i],
                numeric,
            };
        }
    }
    Ok(report)
}
