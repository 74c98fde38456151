//! Distribution distances and hypothesis tests used by the Monte Carlo
//! harnesses: total variation on weight vectors, one- and two-sample
//! Kolmogorov-Smirnov, and a chi-square goodness-of-fit test. All tests run
//! at the fixed significance [`tol::SIGNIFICANCE`] unless a caller overrides
//! the threshold explicitly.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::tol;

/// Total variation distance between two weight vectors on the same support:
/// 0.5 * sum |p - q|. Symmetric, in [0, 1] for probability vectors.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::SupportMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    if p.is_empty() {
        return Err(Error::InvalidArgument("empty distributions".into()));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Outcome of a single statistical test.
#[derive(Debug, Clone, Serialize)]
pub struct StatReport {
    /// Which test ran ("tv", "ks-two-sample", "ks-one-sample", "chi-square").
    pub test: String,
    pub statistic: f64,
    /// Sample sizes (or support sizes for weight-based tests).
    pub n: usize,
    pub m: usize,
    /// Reject when statistic > threshold.
    pub threshold: f64,
    /// Asymptotic p-value where available.
    pub p_value: Option<f64>,
    pub pass: bool,
}

/// Kolmogorov asymptotic tail Q(lambda) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 lambda^2).
fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 1e-8 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=200 {
        let term = (-2.0 * (k as f64) * (k as f64) * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-14 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// c(alpha) = sqrt(-ln(alpha/2) / 2), the inverse of the Kolmogorov tail.
fn ks_coefficient(alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt()
}

fn sorted(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument("empty sample".into()));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite sample value".into()));
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(v)
}

/// Two-sample KS test at significance `alpha`: D = sup |F_a - F_b| against
/// the critical value c(alpha) sqrt((n+m)/(n m)).
pub fn ks_two_sample(a: &[f64], b: &[f64], alpha: f64) -> Result<StatReport> {
    let xs = sorted(a)?;
    let ys = sorted(b)?;
    let (n, m) = (xs.len(), ys.len());
    let mut i = 0;
    let mut j = 0;
    let mut d: f64 = 0.0;
    // Merge walk; once one sample is exhausted the ECDF gap only shrinks, so
    // the supremum is always recorded inside the loop.
    while i < n && j < m {
        let cut = xs[i].min(ys[j]);
        while i < n && xs[i] <= cut {
            i += 1;
        }
        while j < m && ys[j] <= cut {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let scale = ((n + m) as f64 / (n as f64 * m as f64)).sqrt();
    let threshold = ks_coefficient(alpha) * scale;
    let lambda = d / scale;
    Ok(StatReport {
        test: "ks-two-sample".into(),
        statistic: d,
        n,
        m,
        threshold,
        p_value: Some(kolmogorov_tail(lambda)),
        pass: d <= threshold,
    })
}

/// One-sample KS test of `samples` against a continuous CDF.
pub fn ks_one_sample(samples: &[f64], cdf: impl Fn(f64) -> f64, alpha: f64) -> Result<StatReport> {
    let xs = sorted(samples)?;
    let n = xs.len();
    let mut d: f64 = 0.0;
    for (k, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((f - k as f64 / n as f64).abs());
        d = d.max(((k + 1) as f64 / n as f64 - f).abs());
    }
    let scale = 1.0 / (n as f64).sqrt();
    let threshold = ks_coefficient(alpha) * scale;
    Ok(StatReport {
        test: "ks-one-sample".into(),
        statistic: d,
        n,
        m: 0,
        threshold,
        p_value: Some(kolmogorov_tail(d * (n as f64).sqrt())),
        pass: d <= threshold,
    })
}

/// Chi-square goodness of fit of observed `counts` against cell
/// probabilities `probs` (must be positive and sum to 1 within 1e-9).
pub fn chi_square_gof(counts: &[u64], probs: &[f64], alpha: f64) -> Result<StatReport> {
    if counts.len() != probs.len() {
        return Err(Error::SupportMismatch {
            left: counts.len(),
            right: probs.len(),
        });
    }
    if counts.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 cells".into()));
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("no observations".into()));
    }
    let psum: f64 = probs.iter().sum();
    if (psum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("cell probabilities sum to {psum}")));
    }
    if probs.iter().any(|&p| p <= 0.0) {
        return Err(Error::InvalidArgument("cell probabilities must be positive".into()));
    }
    let mut stat = 0.0;
    for (&c, &p) in counts.iter().zip(probs) {
        let expected = total as f64 * p;
        let d = c as f64 - expected;
        stat += d * d / expected;
    }
    let dof = (counts.len() - 1) as f64;
    let dist = ChiSquared::new(dof).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let threshold = dist.inverse_cdf(1.0 - alpha);
    Ok(StatReport {
        test: "chi-square".into(),
        statistic: stat,
        n: total as usize,
        m: counts.len(),
        threshold,
        p_value: Some(1.0 - dist.cdf(stat)),
        pass: stat <= threshold,
    })
}

/// Weight-vector comparison by total variation against an explicit threshold.
pub fn compare_weights_tv(p: &[f64], q: &[f64], threshold: f64) -> Result<StatReport> {
    let d = tv_distance(p, q)?;
    Ok(StatReport {
        test: "tv".into(),
        statistic: d,
        n: p.len(),
        m: q.len(),
        threshold,
        p_value: None,
        pass: d <= threshold,
    })
}

/// Two-sample comparison at the crate's fixed significance.
pub fn compare_samples_ks(a: &[f64], b: &[f64]) -> Result<StatReport> {
    ks_two_sample(a, b, tol::SIGNIFICANCE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tv_basics() {
        assert_eq!(tv_distance(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        let d1 = tv_distance(&[0.7, 0.3], &[0.4, 0.6]).unwrap();
        let d2 = tv_distance(&[0.4, 0.6], &[0.7, 0.3]).unwrap();
        assert!((d1 - d2).abs() < 1e-15);
        assert!((d1 - 0.3).abs() < 1e-15);
        assert!(matches!(
            tv_distance(&[1.0], &[0.5, 0.5]),
            Err(Error::SupportMismatch { .. })
        ));
    }

    #[test]
    fn ks_critical_coefficient_matches_the_table_value() {
        assert!((ks_coefficient(0.01) - 1.6276).abs() < 1e-3);
        assert!((ks_coefficient(0.05) - 1.3581).abs() < 1e-3);
    }

    #[test]
    fn ks_two_sample_accepts_same_law_and_rejects_disjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Vec<f64> = (0..4000).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..4000).map(|_| rng.random::<f64>()).collect();
        let same = ks_two_sample(&a, &b, 0.01).unwrap();
        assert!(same.pass, "D = {}", same.statistic);
        // Symmetry.
        let swapped = ks_two_sample(&b, &a, 0.01).unwrap();
        assert!((same.statistic - swapped.statistic).abs() < 1e-15);
        // Disjoint supports: D = 1.
        let c: Vec<f64> = a.iter().map(|x| x + 10.0).collect();
        let far = ks_two_sample(&a, &c, 0.01).unwrap();
        assert!(!far.pass);
        assert!((far.statistic - 1.0).abs() < 1e-12);
        assert!(far.p_value.unwrap() < 1e-6);
    }

    #[test]
    fn ks_two_sample_detects_a_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a: Vec<f64> = (0..4000).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..4000).map(|_| rng.random::<f64>() + 0.1).collect();
        let r = ks_two_sample(&a, &b, 0.01).unwrap();
        assert!(!r.pass, "D = {}", r.statistic);
    }

    #[test]
    fn ks_one_sample_against_the_exponential_law() {
        let rate = 2.5;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let xs: Vec<f64> = (0..5000)
            .map(|_| -(1.0 - rng.random::<f64>()).ln() / rate)
            .collect();
        let r = ks_one_sample(&xs, |x| 1.0 - (-rate * x).exp(), 0.01).unwrap();
        assert!(r.pass, "D = {}", r.statistic);
        // Wrong rate is rejected.
        let bad = ks_one_sample(&xs, |x| 1.0 - (-x).exp(), 0.01).unwrap();
        assert!(!bad.pass);
    }

    #[test]
    fn chi_square_uniformity() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut counts = [0u64; 8];
        for _ in 0..100_000 {
            counts[rng.random_range(0..8)] += 1;
        }
        let probs = [1.0 / 8.0; 8];
        let r = chi_square_gof(&counts, &probs, 0.01).unwrap();
        assert!(r.pass, "stat = {}", r.statistic);
        // A biased law against the uniform reference fails.
        let mut biased = [0u64; 8];
        for _ in 0..100_000 {
            let cell = if rng.random::<f64>() < 0.2 {
                0
            } else {
                rng.random_range(0..8)
            };
            biased[cell] += 1;
        }
        let bad = chi_square_gof(&biased, &probs, 0.01).unwrap();
        assert!(!bad.pass);
    }

    #[test]
    fn chi_square_validates_inputs() {
        assert!(matches!(
            chi_square_gof(&[1, 2], &[0.5, 0.4], 0.01),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            chi_square_gof(&[1, 2, 3], &[0.5, 0.5], 0.01),
            Err(Error::SupportMismatch { .. })
        ));
    }

    #[test]
    fn tv_report_wiring() {
        let r = compare_weights_tv(&[0.6, 0.4], &[0.5, 0.5], 0.15).unwrap();
        assert!(r.pass);
        assert!((r.statistic - 0.1).abs() < 1e-15);
        let r2 = compare_weights_tv(&[0.9, 0.1], &[0.5, 0.5], 0.15).unwrap();
        assert!(!r2.pass);
    }
}
