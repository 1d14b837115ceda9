//! Central finite-difference verification of tape gradients.

use crate::{AutodiffError, Result};

/// Per-coordinate comparison of an analytic gradient against central
/// differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub numeric: Vec<f64>,
    pub analytic: Vec<f64>,
    /// `|a - n| / max(|a|, |n|, 1e-8)` per coordinate.
    pub relative_errors: Vec<f64>,
    pub max_relative_error: f64,
    /// Coordinate holding the largest relative error.
    pub worst: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Estimates `(f(θ+h) − f(θ−h)) / 2h` for every coordinate of `params` and
/// compares it with `analytic`.
pub fn finite_difference_check<F>(mut f: F, params: &[f64], analytic: &[f64], h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(AutodiffError::Contract(format!("step must be positive, got {h}")));
    }
    if params.len() != analytic.len() {
        return Err(AutodiffError::Shape {
            op: "finite_difference_check",
            lhs: vec![params.len()],
            rhs: vec![analytic.len()],
        });
    }
    let mut theta = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    for k in 0..params.len() {
        theta[k] = params[k] + h;
        let plus = f(&theta);
        if !plus.is_finite() {
            return Err(AutodiffError::NonFinite { coordinate: k, side: "+h" });
        }
        theta[k] = params[k] - h;
        let minus = f(&theta);
        if !minus.is_finite() {
            return Err(AutodiffError::NonFinite { coordinate: k, side: "-h" });
        }
        theta[k] = params[k];
        numeric.push((plus - minus) / (2.0 * h));
    }
    let relative_errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .collect();
    let (worst, max_relative_error) = relative_errors
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |acc, (k, e)| if e > acc.1 { (k, e) } else { acc });
    Ok(GradCheckReport {
        numeric,
        analytic: analytic.to_vec(),
        relative_errors,
        max_relative_error,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let theta = [0.3, -1.2, 2.5, 0.0];
        let analytic = theta.to_vec();
        let f = |t: &[f64]| 0.5 * t.iter().map(|v| v * v).sum::<f64>();
        let report = finite_difference_check(f, &theta, &analytic, 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-9, "{}", report.max_relative_error);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let theta = [1.0, 2.0];
        let report = finite_difference_check(|_| 4.2, &theta, &[0.0, 0.0], 1e-5).unwrap();
        assert_eq!(report.numeric, vec![0.0, 0.0]);
        assert_eq!(report.max_relative_error, 0.0);
    }

    #[test]
    fn non_finite_value_names_coordinate() {
        let theta = [1.0, 0.0];
        let f = |t: &[f64]| if t[1] > 0.0 { f64::NAN } else { t[0] };
        let err = finite_difference_check(f, &theta, &[1.0, 0.0], 1e-5).unwrap_err();
        assert_eq!(err, AutodiffError::NonFinite { coordinate: 1, side: "+h" });
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(finite_difference_check(|_| 0.0, &[1.0], &[0.0], 0.0).is_err());
    }
}
