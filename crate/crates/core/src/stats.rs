//! Small statistical helpers shared by calibration, the synthetic suite and
//! the harness.

use crate::error::{Error, Result};

/// Two-sided 95% normal critical value.
pub const Z_95: f64 = 1.959964;

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Variance with divisor n.
pub fn population_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (divisor n - 1); zero for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Standard error of the mean.
pub fn std_error(xs: &[f64]) -> f64 {
    sample_std(xs) / (xs.len() as f64).sqrt()
}

/// Standard error of a Bernoulli proportion estimated from `n` draws.
pub fn binomial_sigma(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let mx = mean(xs);
    let my = mean(ys);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 1e-300 || syy <= 1e-300 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_ci(successes: usize, trials: usize, z: f64) -> Result<(f64, f64)> {
    if trials == 0 {
        return Err(Error::input("wilson interval needs at least one trial"));
    }
    if successes > trials {
        return Err(Error::input(format!("{successes} successes out of {trials} trials")));
    }
    if !(z.is_finite() && z > 0.0) {
        return Err(Error::input(format!("critical value must be positive, got {z}")));
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    let lo = if successes == 0 { 0.0 } else { (center - half).clamp(0.0, p) };
    let hi = if successes == trials { 1.0 } else { (center + half).clamp(p, 1.0) };
    Ok((lo, hi))
}
