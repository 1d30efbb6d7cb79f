//! Central finite-difference gradient checks.

/// Perturbation used by the check suites.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-5;
/// Magnitude below which errors are measured against this floor instead of
/// the gradient itself. Central differences at `STEP` carry roundoff around
/// `1e-16 / 1e-5 = 1e-11` in absolute terms, which would dominate a purely
/// relative measure on near-zero components.
pub const FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / scale
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub max_error: f64,
    /// Coordinate with the largest error.
    pub worst: usize,
    pub checked: usize,
    /// Coordinates with a non-zero analytic or numeric derivative.
    pub nonzero: usize,
}

impl GradReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_error < tolerance
    }

    pub fn merge(self, other: GradReport) -> GradReport {
        let (max_error, worst) = if other.max_error > self.max_error {
            (other.max_error, other.worst + self.checked)
        } else {
            (self.max_error, self.worst)
        };
        GradReport { max_error, worst, checked: self.checked + other.checked, nonzero: self.nonzero + other.nonzero }
    }
}

/// Compares `analytic` against central differences of `f` at `x` for the
/// coordinates in `indices`.
pub fn check_indices<F>(mut f: F, x: &[f64], analytic: &[f64], indices: impl IntoIterator<Item = usize>, step: f64) -> GradReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient and point differ in length");
    let mut probe = x.to_vec();
    let mut report = GradReport { max_error: 0.0, worst: 0, checked: 0, nonzero: 0 };
    for i in indices {
        probe[i] = x[i] + step;
        let up = f(&probe);
        probe[i] = x[i] - step;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * step);
        let err = relative_error(analytic[i], numeric, FLOOR);
        if err > report.max_error || err.is_nan() {
            report.max_error = if err.is_nan() { f64::INFINITY } else { err };
            report.worst = i;
        }
        report.checked += 1;
        report.nonzero += (analytic[i] != 0.0 || numeric != 0.0) as usize;
    }
    report
}

/// [`check_indices`] over every coordinate.
pub fn check<F>(f: F, x: &[f64], analytic: &[f64], step: f64) -> GradReport
where
    F: FnMut(&[f64]) -> f64,
{
    check_indices(f, x, analytic, 0..x.len(), step)
}
