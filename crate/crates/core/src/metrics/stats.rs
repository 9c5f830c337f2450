//! Binomial confidence intervals and exact 2x2 contingency tests.

use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::factorial::ln_binomial;

use super::MetricsError;

/// Two-sided normal quantile for the given confidence level.
pub fn z_for_confidence(confidence: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    normal.inverse_cdf(1.0 - (1.0 - confidence) / 2.0)
}

/// Wilson score interval for `successes` out of `n`, clamped to `[0, 1]`.
pub fn wilson_ci(successes: u64, n: u64, confidence: f64) -> Result<(f64, f64), MetricsError> {
    if n == 0 {
        return Err(MetricsError::NoRuns);
    }
    if successes > n {
        return Err(MetricsError::InvalidCounts(format!("{successes} successes out of {n}")));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(MetricsError::InvalidConfidence(confidence));
    }
    let z = z_for_confidence(confidence);
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    let low = if successes == 0 { 0.0 } else { (center - half).max(0.0) };
    let high = if successes == n { 1.0 } else { (center + half).min(1.0) };
    Ok((low, high))
}

/// Probabilities within this relative margin of the observed table count
/// as "no more extreme", absorbing floating-point noise between tables that
/// are exactly equiprobable.
const FISHER_REL_TOLERANCE: f64 = 1e-7;

/// Two-sided Fisher exact test for the table `[[a, b], [c, d]]`.
///
/// Sums the hypergeometric probability of every table with the same
/// margins whose probability does not exceed that of the observed table.
pub fn fisher_exact_2x2(a: u64, b: u64, c: u64, d: u64) -> Result<f64, MetricsError> {
    let total = a + b + c + d;
    if total == 0 {
        return Err(MetricsError::DegenerateTable);
    }
    let row1 = a + b;
    let row2 = c + d;
    let col1 = a + c;

    let ln_denominator = ln_binomial(total, col1);
    let ln_prob = |x: u64| ln_binomial(row1, x) + ln_binomial(row2, col1 - x) - ln_denominator;

    let lo = col1.saturating_sub(row2);
    let hi = row1.min(col1);
    let observed = ln_prob(a);
    let threshold = observed + FISHER_REL_TOLERANCE.ln_1p();

    let (mut included, mut excluded) = (0.0, 0.0);
    for x in lo..=hi {
        let lp = ln_prob(x);
        if lp <= threshold {
            included += lp.exp();
        } else {
            excluded += lp.exp();
        }
    }
    // the complement is exact when nothing is more probable than observed
    let p = if included >= excluded { 1.0 - excluded } else { included };
    Ok(p.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(x: f64, y: f64, tol: f64) -> bool {
        (x - y).abs() <= tol
    }

    #[test]
    fn z_at_95() {
        assert!(close(z_for_confidence(0.95), 1.959964, 1e-6));
    }

    #[test]
    fn wilson_reference_values() {
        // independent reference: statsmodels proportion_confint(method="wilson")
        let cases = [
            (16, 16, 0.806, 1.000),
            (14, 16, 0.640, 0.965),
            (12, 16, 0.505, 0.898),
            (9, 16, 0.332, 0.769),
            (2, 16, 0.035, 0.360),
        ];
        for (x, n, lo, hi) in cases {
            let (l, h) = wilson_ci(x, n, 0.95).unwrap();
            assert!(close(l, lo, 0.001) && close(h, hi, 0.001), "{x}/{n}: ({l}, {h})");
        }
    }

    #[test]
    fn wilson_edges() {
        assert_eq!(wilson_ci(0, 10, 0.95).unwrap().0, 0.0);
        assert_eq!(wilson_ci(10, 10, 0.95).unwrap().1, 1.0);
        assert!(matches!(wilson_ci(0, 0, 0.95), Err(MetricsError::NoRuns)));
        assert!(wilson_ci(3, 2, 0.95).is_err());
        assert!(wilson_ci(1, 2, 1.0).is_err());
    }

    #[test]
    fn fisher_known_values() {
        assert_eq!(fisher_exact_2x2(8, 8, 8, 8).unwrap(), 1.0);
        assert!(close(fisher_exact_2x2(1, 0, 0, 1).unwrap(), 1.0, 1e-12));
        assert!(fisher_exact_2x2(16, 0, 2, 14).unwrap() < 1e-4);
        assert!(matches!(fisher_exact_2x2(0, 0, 0, 0), Err(MetricsError::DegenerateTable)));
        // single nonzero row: only one table possible
        assert!(close(fisher_exact_2x2(3, 0, 0, 0).unwrap(), 1.0, 1e-12));
    }
}
