use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GradCheckError {
    #[error("step {0} outside [1e-7, 1e-3]")]
    BadStep(f64),
    #[error("analytic gradient has {analytic} entries for a point of {point}")]
    LengthMismatch { analytic: usize, point: usize },
}

/// A coordinate whose central difference could not be formed.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateFailure {
    pub index: usize,
    pub plus: f64,
    pub minus: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub non_finite: Vec<CoordinateFailure>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.non_finite.is_empty() && self.max_rel_error < tolerance
    }
}

/// Compares `analytic` against central differences of `f` at `point`.
pub fn finite_diff_check<F>(
    mut f: F,
    point: &[f64],
    analytic: &[f64],
    step: f64,
) -> Result<GradCheckReport, GradCheckError>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(GradCheckError::BadStep(step));
    }
    if analytic.len() != point.len() {
        return Err(GradCheckError::LengthMismatch {
            analytic: analytic.len(),
            point: point.len(),
        });
    }
    let mut x = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        non_finite: Vec::new(),
    };
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x);
        x[i] = orig - step;
        let minus = f(&x);
        x[i] = orig;
        if !(plus.is_finite() && minus.is_finite()) {
            report.non_finite.push(CoordinateFailure { index: i, plus, minus });
            continue;
        }
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        if err > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}
