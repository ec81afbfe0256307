use alloc::string::String;
use alloc::vec::Vec;

use super::AutodiffError;

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    /// `max_i |g_i − ĝ_i| / (1 + max(|g_i|, |ĝ_i|))`.
    pub max_rel_err: f64,
    /// Coordinate where the worst error occurred.
    pub worst_index: Option<usize>,
    pub step: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    /// Folds several reports for the same op into one, keeping the worst.
    pub fn worst_of(op: &str, reports: impl IntoIterator<Item = GradCheckReport>) -> Self {
        let mut out = GradCheckReport {
            op: String::from(op),
            max_rel_err: 0.0,
            worst_index: None,
            step: 0.0,
        };
        for r in reports {
            out.step = r.step;
            if r.max_rel_err >= out.max_rel_err {
                out.max_rel_err = r.max_rel_err;
                out.worst_index = r.worst_index;
            }
        }
        out
    }
}

/// Central differences `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every
/// coordinate.
pub fn numeric_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>, AutodiffError>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(AutodiffError::InvalidStep(h));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(AutodiffError::NonFinite(i));
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Checks `analytic` against central differences of `f` at `x`.
pub fn finite_difference_check<F>(
    op: &str,
    f: F,
    x: &[f64],
    analytic: &[f64],
    h: f64,
) -> Result<GradCheckReport, AutodiffError>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != x.len() {
        return Err(AutodiffError::GradientLength {
            expected: x.len(),
            got: analytic.len(),
        });
    }
    let numeric = numeric_gradient(f, x, h)?;
    let mut report = GradCheckReport {
        op: String::from(op),
        max_rel_err: 0.0,
        worst_index: None,
        step: h,
    };
    for (i, (&g, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (g - n).abs() / (1.0 + g.abs().max(n.abs()));
        if report.worst_index.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = numeric_gradient(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn report_flags_wrong_gradient() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let good = finite_difference_check("q", f, &[1.0, 2.0], &[2.0, 3.0], 1e-5).unwrap();
        assert!(good.passes(1e-8));
        let bad = finite_difference_check("q", f, &[1.0, 2.0], &[2.0, 4.0], 1e-5).unwrap();
        assert_eq!(bad.worst_index, Some(1));
        assert!(!bad.passes(1e-4));
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        assert_eq!(
            numeric_gradient(|x| x[0], &[1.0], 0.0).unwrap_err(),
            AutodiffError::InvalidStep(0.0)
        );
        assert_eq!(
            numeric_gradient(|x| if x[0] > 1.0 { f64::NAN } else { x[0] }, &[1.0], 1e-5)
                .unwrap_err(),
            AutodiffError::NonFinite(0)
        );
    }
}
