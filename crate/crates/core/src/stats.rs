//! Sample statistics shared by the Monte Carlo estimators.

use serde::{Deserialize, Serialize};

/// A Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate { value, stderr: 0.0 }
    }

    /// Mean and standard error of the mean of independent samples.
    pub fn from_samples(xs: &[f64]) -> Self {
        let (m, v) = mean_var(xs);
        let n = xs.len() as f64;
        Estimate {
            value: m,
            stderr: if xs.len() > 1 { (v / n).sqrt() } else { 0.0 },
        }
    }

    /// `|value − reference| ≤ k·stderr`, with a relative floor of `1e-9` so
    /// that exact (zero-variance) estimators compare within rounding.
    pub fn within(&self, reference: f64, k: f64) -> bool {
        (self.value - reference).abs() <= k * self.stderr + 1e-9 * (1.0 + reference.abs())
    }
}

/// Sample mean and unbiased variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    (m, v)
}

pub fn mean(xs: &[f64]) -> f64 {
    mean_var(xs).0
}

/// Standard error of the mean of `k` independent batch estimates.
pub fn batch_stderr(batches: &[f64]) -> f64 {
    if batches.len() < 2 {
        return 0.0;
    }
    (mean_var(batches).1 / batches.len() as f64).sqrt()
}

/// Ordinary least squares of `y` on `x` with intercept. Returns
/// `(intercept, slope, r_squared)`.
pub fn simple_ols(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { (sxy * sxy) / (sxx * syy) } else { 1.0 };
    (intercept, slope, r2)
}

/// Weights `w` with `slope = Σ w_k y_k` for the OLS slope on abscissae `x`.
pub fn ols_slope_weights(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    x.iter().map(|v| (v - mx) / sxx).collect()
}

/// Two-sided normal quantile used for "k standard errors" statements.
pub const Z95: f64 = 1.96;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimate_from_samples() {
        let e = Estimate::from_samples(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.value, 2.5);
        assert!((e.stderr - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert!(Estimate::exact(1.0).within(1.0 + 1e-12, 3.0));
        assert!(!Estimate::exact(1.0).within(1.001, 3.0));
    }

    #[test]
    fn ols_recovers_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let (a, b, r2) = simple_ols(&x, &y);
        assert!((a - 2.0).abs() < 1e-12 && (b + 0.5).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
        let w = ols_slope_weights(&x);
        let s: f64 = w.iter().zip(&y).map(|(w, y)| w * y).sum();
        assert!((s + 0.5).abs() < 1e-12);
    }
}
