//! Central finite-difference comparison against analytic gradients.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    /// Worst `|numeric - analytic| / max(1, |analytic|)` over coordinates.
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn finite_diff_check<F>(f: F, point: &[f64], analytic: &[f64], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::validation(format!("finite-difference step must be > 0, got {step}")));
    }
    if point.len() != analytic.len() {
        return Err(Error::validation(format!(
            "point has {} coordinates, analytic gradient has {}",
            point.len(),
            analytic.len()
        )));
    }
    let mut x = point.to_vec();
    let mut numeric = Vec::with_capacity(point.len());
    let mut worst = (0.0_f64, 0_usize);
    for i in 0..point.len() {
        x[i] = point[i] + step;
        let plus = f(&x);
        x[i] = point[i] - step;
        let minus = f(&x);
        x[i] = point[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite evaluation while perturbing coordinate {i}"
            )));
        }
        let d = (plus - minus) / (2.0 * step);
        let err = (d - analytic[i]).abs() / analytic[i].abs().max(1.0);
        if err > worst.0 {
            worst = (err, i);
        }
        numeric.push(d);
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_coordinate: worst.1,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_at_origin() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let r = finite_diff_check(f, &[0.0; 4], &[0.0; 4], 1e-3).unwrap();
        assert!(r.max_rel_error <= 1e-6);
    }

    #[test]
    fn linear_is_exact_up_to_rounding() {
        let c = [1.5, -2.0, 0.25];
        let f = |x: &[f64]| x.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
        let r = finite_diff_check(f, &[0.3, 0.7, -1.1], &c, 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-10);
    }

    #[test]
    fn flags_wrong_gradient_and_bad_inputs() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let r = finite_diff_check(f, &[1.0, 0.0], &[2.0, 4.0], 1e-5).unwrap();
        assert_eq!(r.worst_coordinate, 1);
        assert!((r.max_rel_error - 0.25).abs() < 1e-6);
        assert!(finite_diff_check(f, &[1.0, 0.0], &[2.0, 3.0], 0.0).is_err());
        let g = |x: &[f64]| if x[1] > 0.0 { f64::NAN } else { 0.0 };
        let err = finite_diff_check(g, &[0.0, 0.0], &[0.0, 0.0], 1e-3).unwrap_err();
        assert!(err.to_string().contains("coordinate 1"));
    }
}
