//! Two-sample Kolmogorov–Smirnov test.

/// Kolmogorov survival function `Q(λ) = 2 Σ_{k≥1} (-1)^{k-1} e^{-2k²λ²}`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=200 {
        let term = sign * (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 * sum.abs() {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KsResult {
    /// `sup_x |F_a(x) - F_b(x)|`.
    pub statistic: f64,
    /// Asymptotic p-value with the small-sample correction of Stephens.
    pub p_value: f64,
}

/// Compares the empirical distributions of `a` and `b`; NaNs are rejected by
/// returning `None`, as are empty inputs.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Option<KsResult> {
    if a.is_empty() || b.is_empty() || a.iter().chain(b).any(|v| v.is_nan()) {
        return None;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d): (usize, usize, f64) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let en = (na * nb / (na + nb)).sqrt();
    let p_value = kolmogorov_q((en + 0.12 + 0.11 / en) * d);
    Some(KsResult { statistic: d, p_value })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn kolmogorov_reference_points() {
        // Critical values of the Kolmogorov distribution.
        assert_relative_eq!(kolmogorov_q(1.3581), 0.05, epsilon = 1e-4);
        assert_relative_eq!(kolmogorov_q(1.6276), 0.01, epsilon = 1e-4);
        assert_eq!(kolmogorov_q(0.0), 1.0);
    }

    #[test]
    fn identical_samples_have_zero_statistic() {
        let a: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let r = ks_two_sample(&a, &a).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn disjoint_samples_are_rejected() {
        let a: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..100).map(|i| 1000.0 + i as f64).collect();
        let r = ks_two_sample(&a, &b).unwrap();
        assert_eq!(r.statistic, 1.0);
        assert!(r.p_value < 1e-10);
        assert!(ks_two_sample(&[], &b).is_none());
        assert!(ks_two_sample(&[f64::NAN], &b).is_none());
    }

    #[test]
    fn interleaved_samples_statistic() {
        let r = ks_two_sample(&[1.0, 3.0, 5.0], &[2.0, 4.0, 6.0]).unwrap();
        assert_relative_eq!(r.statistic, 1.0 / 3.0, epsilon = 1e-15);
    }
}
