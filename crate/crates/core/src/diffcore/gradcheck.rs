//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Half-width of the central difference; must lie in `[1e-7, 1e-4]`.
    pub eps: f64,
    /// At most this many coordinates are probed; all of them when `None`.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Skip coordinates whose one-sided slopes differ by more than this
    /// fraction: the probe interval then straddles a kink (relu, `|x|`)
    /// where no derivative exists. `None` checks every sampled coordinate.
    pub kink_tol: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates excluded as kink crossings.
    pub skipped: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-6,
            max_coords: Some(64),
            seed: 0,
            kink_tol: None,
        }
    }
}

/// Maximum relative disagreement between `analytic` and central differences of `f`
/// over sampled coordinates of `params`.
///
/// Relative error at a coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[f64], analytic: &[f64], cfg: GradCheckConfig) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    grad_check_report(f, params, analytic, cfg).map(|r| r.max_rel_error)
}

/// As [`grad_check`], also counting the coordinates checked and skipped.
/// Fails when every sampled coordinate was skipped.
pub fn grad_check_report<F>(mut f: F, params: &[f64], analytic: &[f64], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(1e-7..=1e-4).contains(&cfg.eps) {
        return Err(Error::invalid(format!("grad_check eps {} outside [1e-7, 1e-4]", cfg.eps)));
    }
    if params.len() != analytic.len() {
        return Err(Error::shape("grad_check", params.len(), analytic.len()));
    }
    let base = f(params);
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {base}")));
    }
    let coords: Vec<usize> = match cfg.max_coords {
        Some(k) if k < params.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut idx = sample(&mut rng, params.len(), k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..params.len()).collect(),
    };
    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    let (mut checked, mut skipped) = (0, 0);
    for i in coords {
        let orig = probe[i];
        probe[i] = orig + cfg.eps;
        let plus = f(&probe);
        probe[i] = orig - cfg.eps;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective non-finite near coordinate {i}")));
        }
        if let Some(tol) = cfg.kink_tol {
            let fwd = (plus - base) / cfg.eps;
            let bwd = (base - minus) / cfg.eps;
            if (fwd - bwd).abs() > tol * fwd.abs().max(bwd.abs()).max(1e-8) {
                skipped += 1;
                continue;
            }
        }
        let numeric = (plus - minus) / (2.0 * cfg.eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
        checked += 1;
    }
    if checked == 0 && skipped > 0 {
        return Err(Error::invalid("grad_check: every sampled coordinate straddles a kink"));
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        checked,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let p = vec![0.3, -1.2, 2.5, 0.01];
        let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        let err = grad_check(|x| x.iter().map(|v| v * v).sum(), &p, &g, GradCheckConfig::default()).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let p = vec![1.0, 2.0];
        let err = grad_check(|_| 4.0, &p, &[0.0, 0.0], GradCheckConfig::default()).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let p = vec![1.0, 2.0];
        let err = grad_check(|x| x[0] * x[1], &p, &[2.0, 2.0], GradCheckConfig::default()).unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn kink_crossings_are_skipped() {
        // |x| probed at 1e-7 with eps 1e-6: the central difference is 0.1
        // while the analytic slope on the right is 1.
        let p = vec![1e-7, 0.5];
        let g = vec![1.0, 1.0];
        let f = |x: &[f64]| x[0].abs() + x[1].abs();
        assert!(grad_check(f, &p, &g, GradCheckConfig::default()).unwrap() > 0.5);
        let cfg = GradCheckConfig {
            kink_tol: Some(1e-3),
            ..Default::default()
        };
        let r = grad_check_report(f, &p, &g, cfg).unwrap();
        assert_eq!((r.checked, r.skipped), (1, 1));
        assert!(r.max_rel_error < 1e-8);
        // A wrong slope is still caught at smooth coordinates.
        let r = grad_check_report(f, &p, &[1.0, 1.1], cfg).unwrap();
        assert!(r.max_rel_error > 0.05);
    }

    #[test]
    fn non_finite_objective_rejected() {
        assert!(grad_check(|_| f64::NAN, &[1.0], &[0.0], GradCheckConfig::default()).is_err());
        let cfg = GradCheckConfig {
            eps: 1e-2,
            ..Default::default()
        };
        assert!(grad_check(|_| 0.0, &[1.0], &[0.0], cfg).is_err());
    }
}
