//! Beta–Binomial posterior arithmetic and Beta quantiles.
//!
//! The acceptance engine tallies Bernoulli indicators and reports a conjugate
//! Beta posterior with equal-tailed credible intervals. Quantiles are solved
//! by bracketed bisection with Newton refinement on the regularized
//! incomplete beta function.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, PartialEq)]
pub enum BetaError {
    #[error("beta parameters must be positive, got a={a}, b={b}")]
    NonPositiveParameters { a: f64, b: f64 },
    #[error("probability must lie in (0,1), got {0}")]
    ProbabilityOutOfRange(f64),
    #[error("quantile iteration failed to converge for a={a}, b={b}, p={p}")]
    NoConvergence { a: f64, b: f64, p: f64 },
    #[error("tally invalid: k={k} exceeds n={n}")]
    InvalidTally { k: u64, n: u64 },
}

/// Beta distribution parameters, used both as prior and posterior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams<R> {
    pub a: R,
    pub b: R,
}

impl<R: Real> BetaParams<R> {
    pub fn new(a: R, b: R) -> Result<Self, BetaError> {
        if a <= R::zero() || b <= R::zero() {
            return Err(BetaError::NonPositiveParameters {
                a: a.to_f64_lossy(),
                b: b.to_f64_lossy(),
            });
        }
        Ok(Self { a, b })
    }

    /// Uniform prior Beta(1, 1).
    pub fn uniform() -> Self {
        Self { a: R::one(), b: R::one() }
    }

    /// Jeffreys prior Beta(1/2, 1/2).
    pub fn jeffreys() -> Self {
        Self { a: R::of(0.5), b: R::of(0.5) }
    }

    /// Conjugate update with `k` successes out of `n` trials:
    /// Beta(a + k, b + n − k).
    pub fn update(&self, k: u64, n: u64) -> Result<Self, BetaError> {
        if k > n {
            return Err(BetaError::InvalidTally { k, n });
        }
        Ok(Self {
            a: self.a + R::from_u64(k).unwrap(),
            b: self.b + R::from_u64(n - k).unwrap(),
        })
    }

    /// Posterior mean a / (a + b).
    pub fn mean(&self) -> R {
        self.a / (self.a + self.b)
    }

    /// Equal-tailed credible interval at coverage `level` (e.g., 0.95).
    pub fn credible_interval(&self, level: R) -> Result<(R, R), BetaError> {
        if level <= R::zero() || level >= R::one() {
            return Err(BetaError::ProbabilityOutOfRange(level.to_f64_lossy()));
        }
        let tail = (R::one() - level) / R::of(2.0);
        let lo = beta_quantile(self.a, self.b, tail)?;
        let hi = beta_quantile(self.a, self.b, R::one() - tail)?;
        Ok((lo, hi))
    }
}

/// ln Γ(x) via the Lanczos approximation (g = 7, 9 coefficients).
pub fn ln_gamma<R: Real>(x: R) -> R {
    const COEFFS: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    let half = R::of(0.5);
    if x < half {
        // Reflection: Γ(x) Γ(1−x) = π / sin(πx)
        let pi = R::of(std::f64::consts::PI);
        return pi.ln() - (pi * x).sin().abs().ln() - ln_gamma(R::one() - x);
    }
    let x = x - R::one();
    let mut acc = R::of(0.99999999999980993);
    for (i, &c) in COEFFS.iter().enumerate() {
        acc = acc + R::of(c) / (x + R::from_usize(i + 1).unwrap());
    }
    let t = x + R::of(7.5);
    let ln_sqrt_2pi = R::of(0.91893853320467274178);
    ln_sqrt_2pi + (x + half) * t.ln() - t + acc.ln()
}

/// ln B(a, b).
pub fn ln_beta<R: Real>(a: R, b: R) -> R {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Regularized incomplete beta function I_x(a, b) via Lentz's continued
/// fraction, with the symmetry transform for fast convergence.
pub fn reg_inc_beta<R: Real>(a: R, b: R, x: R) -> Result<R, BetaError> {
    if a <= R::zero() || b <= R::zero() {
        return Err(BetaError::NonPositiveParameters {
            a: a.to_f64_lossy(),
            b: b.to_f64_lossy(),
        });
    }
    if x <= R::zero() {
        return Ok(R::zero());
    }
    if x >= R::one() {
        return Ok(R::one());
    }
    let front = (a * x.ln() + b * (R::one() - x).ln() - ln_beta(a, b)).exp();
    // Use the continued fraction on the side where it converges quickly.
    let one = R::one();
    if x < (a + one) / (a + b + R::of(2.0)) {
        Ok(front * beta_cf(a, b, x) / a)
    } else {
        Ok(one - front * beta_cf(b, a, one - x) / b)
    }
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf<R: Real>(a: R, b: R, x: R) -> R {
    let tiny = R::of(1e-30);
    let eps = R::epsilon() * R::of(8.0);
    let one = R::one();
    let qab = a + b;
    let qap = a + one;
    let qam = a - one;

    let mut c = one;
    let mut d = one - qab * x / qap;
    if d.abs() < tiny {
        d = tiny;
    }
    d = one / d;
    let mut h = d;

    for m in 1..=300 {
        let m_f = R::from_i32(m).unwrap();
        let m2 = m_f + m_f;

        let aa = m_f * (b - m_f) * x / ((qam + m2) * (a + m2));
        d = one + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = one + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = one / d;
        h = h * d * c;

        let aa = -(a + m_f) * (qab + m_f) * x / ((a + m2) * (qap + m2));
        d = one + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = one + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = one / d;
        let del = d * c;
        h = h * del;

        if (del - one).abs() < eps {
            break;
        }
    }
    h
}

/// Beta quantile: the x with I_x(a, b) = p, to absolute tolerance 1e−10
/// (clamped at a few ulps for narrower scalars).
pub fn beta_quantile<R: Real>(a: R, b: R, p: R) -> Result<R, BetaError> {
    if a <= R::zero() || b <= R::zero() {
        return Err(BetaError::NonPositiveParameters {
            a: a.to_f64_lossy(),
            b: b.to_f64_lossy(),
        });
    }
    if p <= R::zero() || p >= R::one() {
        return Err(BetaError::ProbabilityOutOfRange(p.to_f64_lossy()));
    }
    let tol = R::of(1e-10).max(R::epsilon() * R::of(4.0));
    let one = R::one();
    let half = R::of(0.5);

    // Bisection bracket.
    let mut lo = R::zero();
    let mut hi = one;
    let mut x = a / (a + b);
    for _ in 0..200 {
        let f = reg_inc_beta(a, b, x)? - p;
        if f > R::zero() {
            hi = x;
        } else {
            lo = x;
        }
        // Newton step from the current iterate, falling back to bisection
        // whenever it leaves the bracket.
        let ln_pdf = (a - one) * x.ln() + (b - one) * (one - x).ln() - ln_beta(a, b);
        let mut next = x - f / ln_pdf.exp();
        if !(next > lo && next < hi) || !next.is_finite() {
            next = half * (lo + hi);
        }
        let step = (next - x).abs();
        x = next;
        if step <= tol && (hi - lo) <= tol * R::of(4.0) {
            return Ok(x);
        }
        if hi - lo <= tol {
            return Ok(half * (lo + hi));
        }
    }
    Err(BetaError::NoConvergence {
        a: a.to_f64_lossy(),
        b: b.to_f64_lossy(),
        p: p.to_f64_lossy(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_median_is_half() {
        let x = beta_quantile(1.0f64, 1.0, 0.5).unwrap();
        assert!((x - 0.5).abs() < 1e-10);
    }

    #[test]
    fn beta_2_1_has_square_cdf() {
        // CDF is x^2, so the p-quantile is sqrt(p).
        for p in [0.25f64, 0.5, 0.9] {
            let x = beta_quantile(2.0, 1.0, p).unwrap();
            assert!((x - p.sqrt()).abs() < 1e-10, "p={p}: {x}");
        }
        assert!((beta_quantile(2.0f64, 1.0, 0.25).unwrap() - 0.5).abs() < 1e-10);
    }

    #[test]
    fn posterior_update_is_exact() {
        let prior = BetaParams::<f64>::uniform();
        let post = prior.update(7, 10).unwrap();
        assert_eq!(post.a, 8.0);
        assert_eq!(post.b, 4.0);
        assert!((post.mean() - 8.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn update_rejects_k_above_n() {
        assert_eq!(
            BetaParams::<f64>::uniform().update(3, 2),
            Err(BetaError::InvalidTally { k: 3, n: 2 })
        );
    }

    #[test]
    fn ln_gamma_matches_factorials() {
        for n in 1..10u32 {
            let expected: f64 = (1..n).map(|k| f64::from(k).ln()).sum();
            assert!((ln_gamma(f64::from(n)) - expected).abs() < 1e-12, "n={n}");
        }
        // Γ(1/2) = sqrt(π)
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
    }

    #[test]
    fn reg_inc_beta_edge_values() {
        assert_eq!(reg_inc_beta(2.0, 3.0, 0.0).unwrap(), 0.0);
        assert_eq!(reg_inc_beta(2.0, 3.0, 1.0).unwrap(), 1.0);
        // I_x(1,1) = x
        assert!((reg_inc_beta(1.0f64, 1.0, 0.3).unwrap() - 0.3).abs() < 1e-14);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(beta_quantile(0.0, 1.0, 0.5).is_err());
        assert!(beta_quantile(1.0, 1.0, 0.0).is_err());
        assert!(beta_quantile(1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn credible_interval_brackets_mean() {
        let post = BetaParams::new(8.0, 4.0).unwrap();
        let (lo, hi) = post.credible_interval(0.95).unwrap();
        assert!(0.0 < lo && lo < post.mean() && post.mean() < hi && hi < 1.0);
    }

    proptest! {
        #[test]
        fn quantile_inverts_cdf(a in 0.5f64..10.0, b in 0.5f64..10.0, p in 0.01f64..0.99) {
            let x = beta_quantile(a, b, p).unwrap();
            let back = reg_inc_beta(a, b, x).unwrap();
            prop_assert!((back - p).abs() < 1e-8, "a={a} b={b} p={p} x={x} back={back}");
        }

        #[test]
        fn quantile_is_monotone_in_p(a in 0.5f64..10.0, b in 0.5f64..10.0, p in 0.02f64..0.97) {
            let x1 = beta_quantile(a, b, p).unwrap();
            let x2 = beta_quantile(a, b, p + 0.01).unwrap();
            prop_assert!(x2 >= x1 - 1e-12);
        }

        #[test]
        fn posterior_params_are_additive(k in 0u64..50, extra in 0u64..50, a0 in 0.5f64..3.0, b0 in 0.5f64..3.0) {
            let n = k + extra;
            let post = BetaParams::new(a0, b0).unwrap().update(k, n).unwrap();
            prop_assert_eq!(post.a, a0 + k as f64);
            prop_assert_eq!(post.b, b0 + (n - k) as f64);
        }
    }
}
