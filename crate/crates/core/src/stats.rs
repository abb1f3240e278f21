//! Hypothesis tests used by the ablation comparisons.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Asymptotic Kolmogorov survival function `P(K > x)`.
fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 0.3 {
        // the alternating series converges too slowly here; the value is 1 to machine precision
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * x * x).exp();
        sum += if k as i64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov–Smirnov test of `samples` against `cdf`.
/// The p-value uses the asymptotic distribution with Stephens' small-sample correction.
pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<TestResult> {
    if samples.is_empty() || samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("KS test needs finite samples"));
    }
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &v) in x.iter().enumerate() {
        let f = cdf(v);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    let sn = n.sqrt();
    Ok(TestResult {
        statistic: d,
        p_value: kolmogorov_sf((sn + 0.12 + 0.11 / sn) * d),
    })
}

/// Uniform CDF on `[lo, hi]`.
pub fn uniform_cdf(lo: f64, hi: f64) -> impl Fn(f64) -> f64 {
    move |v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
}

/// Paired one-sided t-test of `H1: mean(a - b) < 0`.
pub fn paired_t_less(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid("paired t-test needs two equal samples of size >= 2"));
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        let p = if mean < 0.0 { 0.0 } else { 1.0 };
        return Ok(TestResult {
            statistic: if mean < 0.0 { f64::NEG_INFINITY } else { f64::INFINITY },
            p_value: p,
        });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(TestResult {
        statistic: t,
        p_value: dist.cdf(t),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kolmogorov_tail_reference_points() {
        // tabulated critical values of the Kolmogorov distribution
        assert!((kolmogorov_sf(1.3581) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_sf(1.6276) - 0.01).abs() < 1e-3);
    }

    #[test]
    fn ks_statistic_by_hand() {
        let r = ks_test(&[0.1, 0.5, 0.9], uniform_cdf(0.0, 1.0)).unwrap();
        // largest gap is at 0.1 (F = 0.1 vs 1/3) and 0.9 (2/3 vs 0.9)
        assert!((r.statistic - (1.0 / 3.0 - 0.1)).abs() < 1e-12);
        let bad = ks_test(&vec![0.05; 200], uniform_cdf(0.0, 1.0)).unwrap();
        assert!(bad.p_value < 1e-6);
    }

    #[test]
    fn paired_t_matches_hand_computation() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [2.0, 2.5, 4.5, 4.5];
        // diffs -1, -0.5, -1.5, -0.5: mean -0.875, sd 0.4787
        let r = paired_t_less(&a, &b).unwrap();
        let sd = ((0.015625 + 0.140625 + 0.390625 + 0.140625) / 3.0f64).sqrt();
        assert!((r.statistic - (-0.875 / (sd / 2.0))).abs() < 1e-12);
        assert!(r.p_value < 0.02 && r.p_value > 0.0);
        assert!(paired_t_less(&b, &a).unwrap().p_value > 0.9);
    }
}
