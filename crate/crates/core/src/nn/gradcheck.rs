//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol: f64,
    /// Above this many coordinates a seeded random subset of this size is
    /// checked. Never below 200.
    pub max_coords: usize,
    /// Denominator floor for the relative error, so that coordinates with
    /// near-zero gradient are judged on absolute error.
    pub abs_floor: f64,
    pub seed: u64,
}

impl GradCheckConfig {
    pub fn with_tol(tol: f64) -> Self {
        GradCheckConfig {
            tol,
            ..Default::default()
        }
    }
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tol: 1e-4,
            max_coords: 400,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare `analytic` against central differences of `loss` around `point`.
pub fn gradient_check<F>(mut loss: F, point: &[f64], analytic: &[f64], cfg: &GradCheckConfig) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(point.len(), analytic.len(), "gradient length must match point");
    let n = point.len();
    let budget = cfg.max_coords.max(200);
    let coords: Vec<usize> = if n <= budget {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut idx = sample(&mut rng, n, budget).into_vec();
        idx.sort_unstable();
        idx
    };
    let mut x = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coord: coords.first().copied().unwrap_or(0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: coords.len(),
        tol: cfg.tol,
        passed: true,
    };
    for &i in &coords {
        let orig = x[i];
        x[i] = orig + cfg.step;
        let plus = loss(&x);
        x[i] = orig - cfg.step;
        let minus = loss(&x);
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let err = relative_error(analytic[i], numeric, cfg.abs_floor);
        let err = if err.is_nan() { f64::INFINITY } else { err };
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coord = i;
            report.analytic_at_worst = analytic[i];
            report.numeric_at_worst = numeric;
        }
    }
    report.passed = report.max_rel_error <= cfg.tol;
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let f = |x: &[f64]| x.iter().map(|v| v * v * 0.5 + v.sin()).sum::<f64>();
        let p = [0.3f64, -1.2, 2.0];
        let g: Vec<f64> = p.iter().map(|v: &f64| v + v.cos()).collect();
        let r = gradient_check(f, &p, &g, &GradCheckConfig::with_tol(1e-7));
        assert!(r.passed, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn sign_flip_fails() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let p = [0.5, 1.5];
        let g: Vec<f64> = p.iter().map(|v| -2.0 * v).collect();
        let r = gradient_check(f, &p, &g, &GradCheckConfig::default());
        assert!(!r.passed);
        assert!((r.max_rel_error - 2.0).abs() < 1e-6);
    }

    #[test]
    fn large_inputs_are_sampled() {
        let f = |x: &[f64]| x.iter().sum::<f64>();
        let p = vec![0.0; 5000];
        let g = vec![1.0; 5000];
        let r = gradient_check(f, &p, &g, &GradCheckConfig::default());
        assert_eq!(r.checked, 400);
        assert!(r.passed);
    }
}
