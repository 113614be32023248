//! Two-sample Kolmogorov-Smirnov test.

use serde::Serialize;

use super::MeasureError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n_a: usize,
    pub n_b: usize,
}

/// `D = sup |F_a - F_b|` with the asymptotic p-value at effective size
/// `n_a n_b / (n_a + n_b)`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult, MeasureError> {
    if a.is_empty() || b.is_empty() {
        return Err(MeasureError::EmptySample);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable_by(f64::total_cmp);
    b.sort_unstable_by(f64::total_cmp);
    let statistic = ks_statistic_sorted(&a, &b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let effective = na * nb / (na + nb);
    Ok(KsResult { statistic, p_value: kolmogorov_survival(effective.sqrt() * statistic), n_a: a.len(), n_b: b.len() })
}

/// The statistic for two samples already sorted ascending.
pub fn ks_statistic_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = if a[i].total_cmp(&b[j]).is_le() { a[i] } else { b[j] };
        while i < a.len() && a[i].total_cmp(&x).is_le() {
            i += 1;
        }
        while j < b.len() && b[j].total_cmp(&x).is_le() {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// `P(K > lambda)` for the Kolmogorov distribution, 100-term series.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    const TERMS: usize = 100;
    if !(lambda > 0.0) {
        return 1.0;
    }
    let q = if lambda < 1.18 {
        // theta-function form converges fast for small lambda
        let c = -std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let cdf = (2.0 * std::f64::consts::PI).sqrt() / lambda * (1..=TERMS).map(|k| (c * ((2 * k - 1) as f64).powi(2)).exp()).sum::<f64>();
        1.0 - cdf
    } else {
        let c = -2.0 * lambda * lambda;
        2.0 * (1..=TERMS)
            .map(|k| {
                let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                sign * (c * (k * k) as f64).exp()
            })
            .sum::<f64>()
    };
    q.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ecdf_oracle(a: &[f64], b: &[f64]) -> f64 {
        let cdf = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
        a.iter().chain(b).map(|&x| (cdf(a, x) - cdf(b, x)).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn identical_samples() {
        let a = [3.0, 1.0, 2.0, 2.0];
        let r = ks_two_sample(&a, &a).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn disjoint_supports() {
        let r = ks_two_sample(&[1.0, 2.0, 3.0], &[4.0, 5.0]).unwrap();
        assert_eq!(r.statistic, 1.0);
    }

    #[test]
    fn interleaved_hand_table() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.5, 2.5, 3.5, 4.5];
        let r = ks_two_sample(&a, &b).unwrap();
        assert_eq!(r.statistic, 0.25);
        assert_eq!(r.statistic, ecdf_oracle(&a, &b));
    }

    #[test]
    fn empty_sample_is_an_error() {
        assert_eq!(ks_two_sample(&[], &[1.0]), Err(MeasureError::EmptySample));
    }

    #[test]
    fn survival_function_reference_values() {
        // standard critical values of the Kolmogorov distribution
        assert!((kolmogorov_survival(1.3581) - 0.05).abs() < 1e-4);
        assert!((kolmogorov_survival(1.6276) - 0.01).abs() < 1e-4);
        assert!((kolmogorov_survival(1.2238) - 0.10).abs() < 1e-4);
        assert!((kolmogorov_survival(0.8276) - 0.50).abs() < 1e-3);
        // both branches agree where they meet
        let (lo, hi) = (kolmogorov_survival(1.18 - 1e-12), kolmogorov_survival(1.18));
        assert!((lo - hi).abs() < 1e-12);
        assert_eq!(kolmogorov_survival(0.0), 1.0);
        assert!(kolmogorov_survival(10.0) < 1e-80);
    }

    proptest! {
        #[test]
        fn matches_oracle_and_is_rank_invariant(
            a in prop::collection::vec(-50i32..50, 1..40),
            b in prop::collection::vec(-50i32..50, 1..40),
        ) {
            let a: Vec<f64> = a.iter().map(|&v| v as f64 * 0.5).collect();
            let b: Vec<f64> = b.iter().map(|&v| v as f64 * 0.5).collect();
            let r = ks_two_sample(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.statistic));
            prop_assert!((r.statistic - ecdf_oracle(&a, &b)).abs() < 1e-15);
            let f = |x: &f64| x.powi(3) + 2.0 * x;
            let t = ks_two_sample(&a.iter().map(f).collect::<Vec<_>>(), &b.iter().map(f).collect::<Vec<_>>()).unwrap();
            prop_assert_eq!(t.statistic, r.statistic);
        }
    }
}
