//! Two-sample Kolmogorov–Smirnov test and the drift-rate statistic built on it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("KS test needs at least 2 samples per side (got {0} and {1})")]
    TooFewSamples(usize, usize),
    #[error("non-finite sample value")]
    NonFinite,
    #[error("drift rate needs a positive time gap, got {0}")]
    NonPositiveGap(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

const SERIES_EPS: f64 = 1e-10;

/// Survival function of the Kolmogorov distribution,
/// `Q(λ) = 2 Σ_{k≥1} (−1)^{k−1} exp(−2k²λ²)`.
///
/// The alternating series converges slowly for small λ, so below 1.18 the
/// equivalent Jacobi-theta form is summed instead.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let q = if lambda < 1.18 {
        let pi2 = std::f64::consts::PI * std::f64::consts::PI;
        let inv = 1.0 / (8.0 * lambda * lambda);
        let mut sum = 0.0;
        for k in 1..=100u32 {
            let odd = f64::from(2 * k - 1);
            let term = (-odd * odd * pi2 * inv).exp();
            sum += term;
            if term < SERIES_EPS {
                break;
            }
        }
        1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * sum
    } else {
        let mut sum = 0.0;
        let mut sign = 1.0;
        for k in 1..=100u32 {
            let kf = f64::from(k);
            let term = (-2.0 * kf * kf * lambda * lambda).exp();
            sum += sign * term;
            if term < SERIES_EPS {
                break;
            }
            sign = -sign;
        }
        2.0 * sum
    };
    q.clamp(0.0, 1.0)
}

/// Stephens' small-sample correction factor applied to `D` before `Q`.
pub fn effective_scale(n_a: usize, n_b: usize) -> f64 {
    let ne = (n_a * n_b) as f64 / (n_a + n_b) as f64;
    let s = ne.sqrt();
    s + 0.12 + 0.11 / s
}

/// Two-sample KS test with the asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult, StatsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(StatsError::TooFewSamples(a.len(), b.len()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let statistic = ks_statistic_sorted(&sa, &sb);
    let p_value = kolmogorov_q(statistic * effective_scale(a.len(), b.len()));
    Ok(KsResult { statistic, p_value })
}

/// `sup |F_a − F_b|` over the merged sorted samples; ties are consumed on both
/// sides before the gap is measured.
pub fn ks_statistic_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// `(1 − KS p-value) / Δt` between cohorts `Δt` apart.
pub fn drift_rate(before: &[f64], after: &[f64], dt: f64) -> Result<f64, StatsError> {
    if !(dt > 0.0) {
        return Err(StatsError::NonPositiveGap(dt));
    }
    let ks = ks_two_sample(before, after)?;
    Ok((1.0 - ks.p_value) / dt)
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Population standard deviation.
pub fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Sample (n−1) standard deviation, as reported in result tables.
pub fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples() {
        let a = [0.3, 1.0, -2.0, 5.5, 0.3];
        let r = ks_two_sample(&a, &a).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert_eq!(drift_rate(&a, &a, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn disjoint_supports() {
        let a: Vec<f64> = (0..500).map(|i| i as f64 / 500.0).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 10.0).collect();
        let r = ks_two_sample(&a, &b).unwrap();
        assert_eq!(r.statistic, 1.0);
        assert!(r.p_value < 1e-10);
        assert!((drift_rate(&a, &b, 1.0).unwrap() - 1.0).abs() < 1e-10);
        assert!((drift_rate(&a, &b, 10.0).unwrap() - 0.1).abs() < 1e-11);
    }

    #[test]
    fn q_branches_agree() {
        // Both series forms are valid everywhere; compare them around the switch.
        for &l in &[0.9, 1.0, 1.1, 1.17, 1.19, 1.3] {
            let alt: f64 = 2.0
                * (1..200)
                    .map(|k: i32| {
                        let kf = k as f64;
                        (if k % 2 == 1 { 1.0 } else { -1.0 }) * (-2.0 * kf * kf * l * l).exp()
                    })
                    .sum::<f64>();
            assert!((kolmogorov_q(l) - alt).abs() < 1e-9, "λ={l}");
        }
        assert_eq!(kolmogorov_q(0.0), 1.0);
        assert!(kolmogorov_q(0.2) > 0.999_999);
        assert!(kolmogorov_q(5.0) < 1e-20);
    }

    #[test]
    fn errors() {
        assert_eq!(
            ks_two_sample(&[1.0], &[1.0, 2.0]),
            Err(StatsError::TooFewSamples(1, 2))
        );
        assert_eq!(
            ks_two_sample(&[1.0, f64::NAN], &[1.0, 2.0]),
            Err(StatsError::NonFinite)
        );
        assert_eq!(
            drift_rate(&[1.0, 2.0], &[1.0, 2.0], 0.0),
            Err(StatsError::NonPositiveGap(0.0))
        );
    }

    #[test]
    fn summary_helpers() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!((sample_std(&[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-12);
    }
}
