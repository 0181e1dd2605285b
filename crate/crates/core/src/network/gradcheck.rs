//! Central finite-difference check of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|numeric|, 1e-8)` over checked coordinates.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Compares `analytic` against `(f(p + eps e_i) - f(p - eps e_i)) / 2 eps`
/// on `coords` randomly chosen coordinates (all of them if fewer exist).
pub fn gradient_check<F>(
    mut loss_fn: F,
    params: &[f64],
    analytic: &[f64],
    eps: f64,
    coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != params.len() {
        return Err(Error::Contract("gradient and parameter lengths differ".into()));
    }
    let base = loss_fn(params);
    if !base.is_finite() {
        return Err(Error::Numerical(format!("loss is {base} at the base point")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, params.len(), coords.min(params.len()));
    let mut p = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        coords_checked: 0,
    };
    for i in picks.iter() {
        let orig = p[i];
        p[i] = orig + eps;
        let plus = loss_fn(&p);
        p[i] = orig - eps;
        let minus = loss_fn(&p);
        p[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss perturbing coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1e-8);
        if report.coords_checked == 0 || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.coords_checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let p: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let r = gradient_check(|x| 0.5 * x.iter().map(|v| v * v).sum::<f64>(), &p, &p, 1e-4, 60, 1).unwrap();
        assert_eq!(r.coords_checked, 60);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let p = vec![1.0, 2.0, 3.0];
        let r = gradient_check(|x| x.iter().sum(), &p, &[1.0, 1.0, 2.0], 1e-4, 3, 0).unwrap();
        assert!(r.max_rel_error > 0.9);
        assert_eq!(r.worst_index, 2);
    }

    #[test]
    fn nan_loss_is_numerical_error() {
        let p = vec![1.0; 4];
        let err = gradient_check(|_| f64::NAN, &p, &p, 1e-4, 4, 0).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }
}
