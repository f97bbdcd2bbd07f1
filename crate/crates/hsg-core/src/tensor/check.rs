//! Finite-difference gradient checking.
//!
//! Central differences against an analytic gradient, with a kink detector so
//! that non-smooth points (relu corners) are reported as excluded rather than
//! failures: at a kink the one-sided differences disagree by an amount that
//! does not shrink with the step, while smooth curvature shrinks linearly.

use super::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordVerdict {
    Pass,
    Excluded,
    Fail,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest absolute analytic-vs-central deviation over checked coords.
    pub max_abs_err: f64,
    /// Largest relative deviation over checked coords with |analytic| > 1e-8.
    pub max_rel_err: f64,
    pub n_checked: usize,
    pub excluded: Vec<usize>,
    pub failures: Vec<(usize, f64, f64)>,
    pub pass: bool,
}

impl GradCheckReport {
    fn empty() -> Self {
        GradCheckReport {
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            n_checked: 0,
            excluded: Vec::new(),
            failures: Vec::new(),
            pass: true,
        }
    }
}

/// Check `analytic` against central differences of `f` at `point`, over every
/// coordinate.
pub fn grad_check<F>(
    f: &mut F,
    point: &[f64],
    analytic: &[f64],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&[f64]) -> f64,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_sampled(f, point, analytic, step, tol, &coords)
}

/// Check only the given coordinates. For large parameter vectors a sampled
/// subset keeps the runtime bounded without weakening the per-coordinate test.
pub fn grad_check_sampled<F>(
    f: &mut F,
    point: &[f64],
    analytic: &[f64],
    step: f64,
    tol: f64,
    coords: &[usize],
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(point.len(), analytic.len());
    let mut x = point.to_vec();
    let mut report = GradCheckReport::empty();

    let eval = |x: &[f64], f: &mut F| -> Result<f64, TensorError> {
        let v = f(x);
        if !v.is_finite() {
            return Err(TensorError::NonFiniteEvaluation);
        }
        Ok(v)
    };

    for &i in coords {
        let orig = point[i];
        x[i] = orig + step;
        let fp = eval(&x, f)?;
        x[i] = orig - step;
        let fm = eval(&x, f)?;
        x[i] = orig;

        let central = (fp - fm) / (2.0 * step);
        let a = analytic[i];
        let verdict = judge(a, central, tol);
        match verdict {
            CoordVerdict::Pass => record(&mut report, a, central),
            CoordVerdict::Fail => {
                // Distinguish a genuine mismatch from a kink: one-sided slopes
                // that disagree by an h-independent amount indicate a corner.
                let f0 = eval(&x, f)?;
                let dplus = (fp - f0) / step;
                let dminus = (f0 - fm) / step;
                let asym1 = (dplus - dminus).abs();
                x[i] = orig + 2.0 * step;
                let fp2 = eval(&x, f)?;
                x[i] = orig - 2.0 * step;
                let fm2 = eval(&x, f)?;
                x[i] = orig;
                let dplus2 = (fp2 - f0) / (2.0 * step);
                let dminus2 = (f0 - fm2) / (2.0 * step);
                let asym2 = (dplus2 - dminus2).abs();
                let significant = asym1 > 1e-3 * (dplus.abs() + dminus.abs() + 1e-12);
                let persistent = asym2 > 0.5 * asym1;
                if significant && persistent {
                    report.excluded.push(i);
                } else {
                    record(&mut report, a, central);
                    report.failures.push((i, a, central));
                    report.pass = false;
                }
            }
            CoordVerdict::Excluded => unreachable!(),
        }
    }
    report.n_checked = coords.len() - report.excluded.len();
    Ok(report)
}

fn judge(analytic: f64, central: f64, tol: f64) -> CoordVerdict {
    let abs = (analytic - central).abs();
    if analytic.abs() > 1e-8 {
        let rel = abs / analytic.abs().max(central.abs());
        if rel <= tol {
            CoordVerdict::Pass
        } else {
            CoordVerdict::Fail
        }
    } else if abs <= tol {
        CoordVerdict::Pass
    } else {
        CoordVerdict::Fail
    }
}

fn record(report: &mut GradCheckReport, analytic: f64, central: f64) {
    let abs = (analytic - central).abs();
    report.max_abs_err = report.max_abs_err.max(abs);
    if analytic.abs() > 1e-8 {
        let rel = abs / analytic.abs().max(central.abs());
        report.max_rel_err = report.max_rel_err.max(rel);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let point = [1.0, 2.0, 3.0];
        let analytic: Vec<f64> = point.iter().map(|v| 2.0 * v).collect();
        let mut f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let report = grad_check(&mut f, &point, &analytic, 1e-5, 1e-4).unwrap();
        assert!(report.pass, "{:?}", report);
        assert_eq!(report.n_checked, 3);
        assert!(report.excluded.is_empty());
    }

    #[test]
    fn relu_kink_is_excluded_not_failed() {
        let point = [0.0];
        // Subgradient convention: derivative 0 at the corner.
        let analytic = [0.0];
        let mut f = |x: &[f64]| x[0].max(0.0);
        let report = grad_check(&mut f, &point, &analytic, 1e-5, 1e-4).unwrap();
        assert!(report.pass, "{:?}", report);
        assert_eq!(report.excluded, vec![0]);
        assert_eq!(report.n_checked, 0);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let point = [1.0, 2.0];
        // Deliberately wrong rule: claims d/dx sum(x^2) = 3x.
        let analytic: Vec<f64> = point.iter().map(|v| 3.0 * v).collect();
        let mut f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let report = grad_check(&mut f, &point, &analytic, 1e-5, 1e-4).unwrap();
        assert!(!report.pass);
        assert_eq!(report.failures.len(), 2);
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        let point = [0.0];
        let analytic = [0.0];
        let mut f = |x: &[f64]| 1.0 / x[0];
        match grad_check(&mut f, &point, &analytic, 1e-5, 1e-4) {
            Err(TensorError::NonFiniteEvaluation) => {}
            other => panic!("expected NonFiniteEvaluation, got {:?}", other),
        }
    }
}
