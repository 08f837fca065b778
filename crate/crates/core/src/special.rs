//! Incomplete gamma function and a sampler for the gamma law conditioned on
//! exceeding a threshold, used by the sparse empty-cell pools.

use rand::Rng;
use statrs::function::gamma::{gamma_ur, ln_gamma};

/// Upper regularized incomplete gamma `Q(a, x)`.
///
/// For `x < 1` a power series with `expm1` keeps full relative accuracy when
/// `Q` is small (tiny shape, tiny threshold), where `1 - P` would cancel.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x >= 1.0 || a >= 10.0 {
        return gamma_ur(a, x);
    }
    // P(a,x) = x^a e^{-x} / Gamma(a+1) * sum_n x^n / ((a+1)...(a+n))
    let mut term = 1.0;
    let mut sum = 1.0;
    for n in 1..200 {
        term *= x / (a + n as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    let log_p = a * x.ln() - x - ln_gamma(a + 1.0) + sum.ln();
    (-log_p.exp_m1()).clamp(0.0, 1.0)
}

/// Draws from `Gamma(a, 1)` conditioned on exceeding `tau`, for `0 < a < 1`
/// and `0 < tau < 1`.
///
/// The conditional density `x^{a-1} e^{-x}` on `(tau, inf)` is split at 1.
/// On `(tau, 1)` propose from `x^{a-1}` by inversion and accept with `e^{-x}`;
/// on `(1, inf)` propose `1 + Exp(1)` and accept with `x^{a-1}`. Component
/// weights are the envelope masses `(1 - tau^a)/a` and `e^{-1}`.
pub fn truncated_gamma<R: Rng + ?Sized>(a: f64, tau: f64, rng: &mut R) -> f64 {
    debug_assert!(a > 0.0 && a < 1.0 && tau > 0.0 && tau < 1.0);
    // (1 - tau^a) / a without cancellation for small a
    let w_low = -(a * tau.ln()).exp_m1() / a;
    let w_high = (-1.0f64).exp();
    let p_low = w_low / (w_low + w_high);
    let ta = tau.powf(a);
    loop {
        if rng.random::<f64>() < p_low {
            let u: f64 = rng.random();
            // inverse cdf of x^{a-1} on (tau, 1): x^a = tau^a + u (1 - tau^a)
            let x = (ta + u * (1.0 - ta)).powf(1.0 / a).clamp(tau, 1.0);
            if rng.random::<f64>() < (-x).exp() {
                return x;
            }
        } else {
            let e: f64 = -(1.0 - rng.random::<f64>()).ln();
            let x = 1.0 + e;
            if rng.random::<f64>() < x.powf(a - 1.0) {
                return x;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use approx::assert_relative_eq;

    #[test]
    fn q_matches_statrs_in_overlap() {
        for &(a, x) in &[(0.5, 0.3), (2.0, 0.7), (0.01, 0.5), (5.0, 0.9)] {
            assert_relative_eq!(gamma_q(a, x), gamma_ur(a, x), max_relative = 1e-10);
        }
    }

    #[test]
    fn q_small_shape_small_threshold() {
        // Q(a, x) = 1 - x^a / Gamma(a+1) (1 + O(x)) for small x
        let (a, x) = (1e-4, 1e-6);
        let approx = -((a * f64::ln(x)) - ln_gamma(1.0 + a)).exp_m1();
        assert_relative_eq!(gamma_q(a, x), approx, max_relative = 1e-5);
        assert!(gamma_q(a, x) > 0.0);
        assert!(gamma_q(1e-300, 0.5) >= 0.0);
    }

    #[test]
    fn truncated_gamma_tail_law() {
        // P(X > y | X > tau) = Q(a, y) / Q(a, tau)
        let (a, tau) = (0.05, 1e-4);
        let mut rng = RngStream::new(9, 0).cell(0, 0, 0);
        let n = 200_000;
        let ys = [1e-3, 1e-2, 0.1, 1.0, 2.0];
        let mut counts = [0usize; 5];
        for _ in 0..n {
            let x = truncated_gamma(a, tau, &mut rng);
            assert!(x > tau);
            for (c, y) in counts.iter_mut().zip(ys) {
                if x > y {
                    *c += 1;
                }
            }
        }
        for (c, y) in counts.iter().zip(ys) {
            let p = gamma_q(a, y) / gamma_q(a, tau);
            let se = (p * (1.0 - p) / n as f64).sqrt();
            let est = *c as f64 / n as f64;
            assert!((est - p).abs() < 4.0 * se + 1e-9, "y={y}: {est} vs {p}");
        }
    }
}
