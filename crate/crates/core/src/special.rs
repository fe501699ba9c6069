//! Scalar special functions used by the densities and their derivatives.

use std::f64::consts::{PI, SQRT_2};

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Natural log of the gamma function.
pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

// Shift x upward with the recurrence until the asymptotic series is accurate.
const ASYMPTOTIC_FROM: f64 = 10.0;

pub fn digamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < ASYMPTOTIC_FROM {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let r = 1.0 / (x * x);
    acc + x.ln() - 0.5 / x
        - r * (1.0 / 12.0
            - r * (1.0 / 120.0 - r * (1.0 / 252.0 - r * (1.0 / 240.0 - r / 132.0))))
}

pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < ASYMPTOTIC_FROM {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let r = 1.0 / (x * x);
    acc + 1.0 / x
        + r / 2.0
        + r / x * (1.0 / 6.0 - r * (1.0 / 30.0 - r * (1.0 / 42.0 - r * (1.0 / 30.0 - r * 5.0 / 66.0))))
}

pub fn tetragamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < ASYMPTOTIC_FROM {
        acc -= 2.0 / (x * x * x);
        x += 1.0;
    }
    let r = 1.0 / (x * x);
    acc - r
        - r / x
        - r * r * (0.5 - r * (1.0 / 6.0 - r * (1.0 / 6.0 - r * (3.0 / 10.0 - r * 5.0 / 6.0))))
}

/// Remainder of Stirling's formula, `ln Γ(k) − [(k − ½) ln k − k + ½ ln 2π]`,
/// and its first three derivatives.
///
/// Large `k` uses the Bernoulli series so the value stays accurate where the
/// direct difference would cancel catastrophically.
pub fn stirling_remainder(k: f64) -> [f64; 4] {
    if k >= ASYMPTOTIC_FROM {
        let r = 1.0 / (k * k);
        let v = (1.0 / k)
            * (1.0 / 12.0 - r * (1.0 / 360.0 - r * (1.0 / 1260.0 - r * (1.0 / 1680.0 - r / 1188.0))));
        let d1 = -r * (1.0 / 12.0 - r * (1.0 / 120.0 - r * (1.0 / 252.0 - r * (1.0 / 240.0 - r / 132.0))));
        let d2 = r / k * (1.0 / 6.0 - r * (1.0 / 30.0 - r * (1.0 / 42.0 - r * (1.0 / 30.0 - r * 5.0 / 66.0))));
        let d3 = -r * r * (0.5 - r * (1.0 / 6.0 - r * (1.0 / 6.0 - r * (3.0 / 10.0 - r * 5.0 / 6.0))));
        [v, d1, d2, d3]
    } else {
        let lk = k.ln();
        let v = ln_gamma(k) - ((k - 0.5) * lk - k + LN_SQRT_2PI);
        let d1 = digamma(k) - lk + 0.5 / k;
        let d2 = trigamma(k) - 1.0 / k - 0.5 / (k * k);
        let d3 = tetragamma(k) + 1.0 / (k * k) + 1.0 / (k * k * k);
        [v, d1, d2, d3]
    }
}

/// `e^t − 1 − t` without cancellation near zero.
pub fn expm1_minus_x(t: f64) -> f64 {
    if t.abs() < 0.5 {
        // t²/2! + t³/3! + ...
        let mut term = t * t / 2.0;
        let mut sum = term;
        let mut n = 2.0;
        while term.abs() > 1e-17 * sum.abs() && n < 40.0 {
            n += 1.0;
            term *= t / n;
            sum += term;
        }
        sum
    } else {
        t.exp_m1() - t
    }
}

pub fn erfc(x: f64) -> f64 {
    statrs::function::erf::erfc(x)
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// `ln Φ(x)` and its first three derivatives.
pub fn ln_norm_cdf(x: f64) -> [f64; 4] {
    let (v, lambda) = if x < -30.0 {
        // Asymptotic Mills ratio for the far lower tail.
        let r = 1.0 / (x * x);
        let series = 1.0 - r + 3.0 * r * r - 15.0 * r * r * r;
        let v = -0.5 * x * x - LN_SQRT_2PI - (-x).ln() + series.ln();
        (v, -x / series)
    } else {
        let cdf = norm_cdf(x);
        (cdf.ln(), norm_pdf(x) / cdf)
    };
    let d2 = -lambda * (x + lambda);
    let d3 = -d2 * (x + lambda) - lambda * (1.0 + d2);
    [v, lambda, d2, d3]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn polygamma_matches_differences_of_ln_gamma() {
        for &x in &[0.3f64, 1.0, 2.5, 7.0, 15.0, 120.0] {
            let h = 1e-5 * x.max(1.0);
            assert!((digamma(x) - central(ln_gamma, x, h)).abs() < 1e-7, "digamma {x}");
            assert!((trigamma(x) - central(digamma, x, h)).abs() < 1e-6, "trigamma {x}");
            assert!((tetragamma(x) - central(trigamma, x, h)).abs() < 1e-5, "tetragamma {x}");
        }
        // ψ(1) = −γ, ψ₁(1) = π²/6, ψ₂(1) = −2ζ(3)
        assert!((digamma(1.0) + 0.577_215_664_901_532_9).abs() < 1e-13);
        assert!((trigamma(1.0) - PI * PI / 6.0).abs() < 1e-12);
        assert!((tetragamma(1.0) + 2.0 * 1.202_056_903_159_594_3).abs() < 1e-11);
    }

    #[test]
    fn stirling_branches_agree_at_switch() {
        let below = {
            let k: f64 = ASYMPTOTIC_FROM - 1e-9;
            let lk = k.ln();
            ln_gamma(k) - ((k - 0.5) * lk - k + LN_SQRT_2PI)
        };
        let above = stirling_remainder(ASYMPTOTIC_FROM)[0];
        assert!((below - above).abs() < 1e-12);
        for &k in &[0.5, 3.0, 12.0, 1e4, 1e8] {
            let s = stirling_remainder(k);
            let h = 1e-5 * k;
            let fd = (stirling_remainder(k + h)[0] - stirling_remainder(k - h)[0]) / (2.0 * h);
            assert!((s[1] - fd).abs() < 1e-7 * (1.0 + s[1].abs()), "k={k}");
        }
    }

    #[test]
    fn ln_norm_cdf_derivatives() {
        for &x in &[-40.0, -8.0, -1.0, 0.0, 2.0, 6.0] {
            let d = ln_norm_cdf(x);
            let h = 1e-5;
            let fd1 = central(|t| ln_norm_cdf(t)[0], x, h);
            let fd2 = central(|t| ln_norm_cdf(t)[1], x, h);
            let fd3 = central(|t| ln_norm_cdf(t)[2], x, h);
            assert!((d[1] - fd1).abs() < 1e-5 * (1.0 + d[1].abs()), "x={x}");
            assert!((d[2] - fd2).abs() < 1e-5 * (1.0 + d[2].abs()), "x={x}");
            assert!((d[3] - fd3).abs() < 1e-4 * (1.0 + d[3].abs()), "x={x}");
        }
    }

    #[test]
    fn expm1_minus_x_small_and_large() {
        assert!((expm1_minus_x(1e-4) - 5.000_166_670_833_5e-9).abs() < 1e-22);
        assert!((expm1_minus_x(2.0) - (2f64.exp() - 3.0)).abs() < 1e-14);
        assert!((expm1_minus_x(-0.49) - ((-0.49f64).exp() - 1.0 + 0.49)).abs() < 1e-16);
    }
}
