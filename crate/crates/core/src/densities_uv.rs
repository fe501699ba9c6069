//! Univariate numbers-at-age densities (families M1–M6), their moments and
//! samplers.
//!
//! The generic `ln_*` functions take the observation as plain `f64` and the
//! prediction/parameters as [`Real`], so the same code serves evaluation and
//! differentiation.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal, StudentT};

use crate::model_space::Family;
use crate::special::{norm_cdf, norm_pdf, LN_SQRT_2PI};
use crate::{Error, Real};

/// Below this |τ| the generalized gamma uses its log-normal expansion.
pub const GEN_GAMMA_SWITCH: f64 = 1e-4;

/// f1: log-normal with median `e^{log_mu}` and log-scale sd `sigma`.
pub fn ln_lognormal<R: Real>(x: f64, log_mu: R, sigma: R) -> R {
    let lx = x.ln();
    let z = (log_mu - lx) / sigma;
    -(z * z) * 0.5 - sigma.ln() - (LN_SQRT_2PI + lx)
}

/// f2: gamma with mean `e^{log_mu}` and shape `shape` (CV = shape^{-1/2}).
pub fn ln_gamma_mean<R: Real>(x: f64, log_mu: R, shape: R) -> R {
    let lx = x.ln();
    shape * shape.ln() - shape.lgamma() - shape * log_mu + (shape - 1.0) * lx
        - shape * (-log_mu).exp() * x
}

/// f3: generalized gamma in the Prentice parameterization with log-location
/// `log_mu`, scale `sigma` and shape `tau`.
pub fn ln_gen_gamma<R: Real>(x: f64, log_mu: R, sigma: R, tau: R) -> R {
    let lx = x.ln();
    let w = (-log_mu + lx) / sigma;
    let base = -sigma.ln() - (LN_SQRT_2PI + lx);
    if tau.value().abs() < GEN_GAMMA_SWITCH {
        // ln f1 minus the leading terms of the expansion in τ
        let w2 = w * w;
        let t2 = tau * tau;
        let series = tau * w2 * w / 6.0
            + t2 * (w2 * w2 / 24.0 + 1.0 / 12.0)
            + t2 * tau * w2 * w2 * w / 120.0
            + t2 * t2 * w2 * w2 * w2 / 720.0;
        base - w2 * 0.5 - series
    } else {
        let t2 = tau * tau;
        let k = t2.recip();
        base - k.stirling_remainder() - (tau * w).exp_m1_minus_x() / t2
    }
}

/// f4: normal with mean `mu` and sd `mu * cv`.
pub fn ln_normal_cv<R: Real>(x: f64, mu: R, cv: R) -> R {
    let sd = mu * cv;
    let z = (-mu + x) / sd;
    -(z * z) * 0.5 - sd.ln() - LN_SQRT_2PI
}

/// f5: normal with location `mu` and sd `mu * cv`, left-truncated at zero.
pub fn ln_trunc_normal_cv<R: Real>(x: f64, mu: R, cv: R) -> R {
    // P(X ≥ 0) = Φ(μ / (μ·cv)) = Φ(1/cv)
    ln_normal_cv(x, mu, cv) - cv.recip().ln_norm_cdf()
}

/// f6: Student's t on the log scale with log-location `log_mu`, scale `sigma`
/// and `df` degrees of freedom.
pub fn ln_log_t<R: Real>(x: f64, log_mu: R, sigma: R, df: R) -> R {
    let lx = x.ln();
    let z = (-log_mu + lx) / sigma;
    let half = (df + 1.0) * 0.5;
    half_gamma_ratio(df * 0.5) - (2.0 * std::f64::consts::PI).ln() * 0.5 - sigma.ln() - lx - half * (z * z / df).ln_1p()
}

/// `ln Γ(x + ½) − ln Γ(x) − ½ ln x`, by its asymptotic series for large `x`
/// where the direct difference loses all precision.
pub(crate) fn half_gamma_ratio<R: Real>(x: R) -> R {
    if x.value() < 40.0 {
        return (x + 0.5).lgamma() - x.lgamma() - x.ln() * 0.5;
    }
    let r = x.recip();
    let r2 = r * r;
    r * ((r2 * ((r2 * ((r2 * (17.0 / 14336.0)) - 1.0 / 640.0)) + 1.0 / 192.0)) - 0.125)
}

/// Arguments of a univariate density evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UvEval {
    /// Observed catch or survey index.
    pub x: f64,
    /// Predicted catch or index.
    pub mu: f64,
    pub sigma: f64,
    /// Generalized-gamma shape (M3) or log-t degrees of freedom (M6).
    pub tau: f64,
}

impl UvEval {
    pub fn new(x: f64, mu: f64, sigma: f64) -> Self {
        UvEval { x, mu, sigma, tau: 0.0 }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }
}

fn domain(family: Family, value: f64, why: &str) -> Error {
    Error::Domain { family: family.to_string(), value, context: format!(": {why}") }
}

/// Checks that an observation lies in the support admitted at fit time.
pub fn check_observation(family: Family, x: f64) -> Result<(), Error> {
    if !x.is_finite() {
        return Err(domain(family, x, "non-finite observation"));
    }
    let ok = match family {
        Family::M4 | Family::M5 => x >= 0.0,
        _ => x > 0.0,
    };
    if ok {
        Ok(())
    } else {
        Err(domain(family, x, "observation must be positive for this family"))
    }
}

/// Log-density of a univariate numbers-at-age family.
pub fn logpdf_uv(family: Family, eval: UvEval) -> Result<f64, Error> {
    let UvEval { x, mu, sigma, tau } = eval;
    if !(mu > 0.0 && sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("{family}: need mu > 0 and sigma > 0")));
    }
    let lm = mu.ln();
    match family {
        Family::M1 | Family::M3 | Family::M6 if x <= 0.0 => {
            Err(domain(family, x, "requires x > 0"))
        }
        Family::M1 => Ok(ln_lognormal(x, lm, sigma)),
        Family::M2 if x < 0.0 => Err(domain(family, x, "requires x >= 0")),
        Family::M2 if x == 0.0 => {
            if sigma < 1.0 {
                Err(domain(family, x, "density unbounded at zero for shape < 1"))
            } else if sigma == 1.0 {
                Ok(-lm)
            } else {
                Ok(f64::NEG_INFINITY)
            }
        }
        Family::M2 => Ok(ln_gamma_mean(x, lm, sigma)),
        Family::M3 => Ok(ln_gen_gamma(x, lm, sigma, tau)),
        Family::M4 => Ok(ln_normal_cv(x, mu, sigma)),
        Family::M5 if x < 0.0 => Err(domain(family, x, "requires x >= 0")),
        Family::M5 => Ok(ln_trunc_normal_cv(x, mu, sigma)),
        Family::M6 if tau <= 0.0 => {
            Err(Error::InvalidParameter("M6: degrees of freedom must be positive".into()))
        }
        Family::M6 => Ok(ln_log_t(x, lm, sigma, tau)),
        other => Err(Error::InvalidParameter(format!("{other} is not a univariate family"))),
    }
}

/// Mean and variance when both exist.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Moments {
    Defined { mean: f64, variance: f64 },
    Undefined,
}

impl Moments {
    pub fn cv(self) -> Option<f64> {
        match self {
            Moments::Defined { mean, variance } => Some(variance.sqrt() / mean),
            Moments::Undefined => None,
        }
    }
}

/// Raw moment `E[X^r]` of the generalized gamma, if finite.
fn gen_gamma_raw_moment(mu: f64, sigma: f64, tau: f64, r: f64) -> Option<f64> {
    let k = 1.0 / (tau * tau);
    let shifted = k + r * sigma / tau;
    if shifted <= 0.0 {
        return None;
    }
    let ln_m = r * mu.ln() + (r * sigma / tau) * (tau * tau).ln() + crate::special::ln_gamma(shifted)
        - crate::special::ln_gamma(k);
    Some(ln_m.exp())
}

/// Mean and variance of a univariate family.
pub fn moments_uv(family: Family, mu: f64, sigma: f64, tau: f64) -> Moments {
    let lognormal = || Moments::Defined {
        mean: mu * (sigma * sigma / 2.0).exp(),
        variance: (sigma * sigma).exp_m1() * (2.0 * mu.ln() + sigma * sigma).exp(),
    };
    match family {
        Family::M1 => lognormal(),
        Family::M2 => Moments::Defined { mean: mu, variance: mu * mu / sigma },
        Family::M3 if tau.abs() < GEN_GAMMA_SWITCH => lognormal(),
        Family::M3 => match (
            gen_gamma_raw_moment(mu, sigma, tau, 1.0),
            gen_gamma_raw_moment(mu, sigma, tau, 2.0),
        ) {
            (Some(m1), Some(m2)) => Moments::Defined { mean: m1, variance: m2 - m1 * m1 },
            _ => Moments::Undefined,
        },
        Family::M4 => Moments::Defined { mean: mu, variance: mu * mu * sigma * sigma },
        Family::M5 => {
            // truncation point sits 1/σ standard deviations below the location
            let a = 1.0 / sigma;
            let lambda = norm_pdf(a) / norm_cdf(a);
            let s = mu * sigma;
            Moments::Defined { mean: mu + s * lambda, variance: s * s * (1.0 - a * lambda - lambda * lambda) }
        }
        _ => Moments::Undefined,
    }
}

/// Draws one observation from a univariate family.
pub fn sample_uv<G: Rng + ?Sized>(family: Family, mu: f64, sigma: f64, tau: f64, rng: &mut G) -> f64 {
    match family {
        Family::M1 => {
            let z: f64 = rng.sample(StandardNormal);
            mu * (sigma * z).exp()
        }
        Family::M2 => Gamma::new(sigma, mu / sigma).expect("valid gamma").sample(rng),
        Family::M3 if tau.abs() < GEN_GAMMA_SWITCH => {
            let z: f64 = rng.sample(StandardNormal);
            mu * (sigma * z).exp()
        }
        Family::M3 => {
            let k = 1.0 / (tau * tau);
            let u: f64 = Gamma::new(k, 1.0).expect("valid gamma").sample(rng);
            mu * ((sigma / tau) * (u / k).ln()).exp()
        }
        Family::M4 => Normal::new(mu, mu * sigma).expect("valid normal").sample(rng),
        Family::M5 => {
            let normal = Normal::new(mu, mu * sigma).expect("valid normal");
            loop {
                let x = normal.sample(rng);
                if x >= 0.0 {
                    break x;
                }
            }
        }
        Family::M6 => {
            let t: f64 = StudentT::new(tau).expect("valid t").sample(rng);
            mu * (sigma * t).exp()
        }
        other => panic!("{other} is not a univariate family"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lp(family: Family, x: f64, mu: f64, sigma: f64, tau: f64) -> f64 {
        logpdf_uv(family, UvEval::new(x, mu, sigma).with_tau(tau)).unwrap()
    }

    #[test]
    fn worked_values() {
        assert!((lp(Family::M1, 1.0, 1.0, 1.0, 0.0) + 0.918_938_533_204_672_7).abs() < 1e-12);
        assert!((lp(Family::M2, 1.0, 1.0, 1.0, 0.0) + 1.0).abs() < 1e-12);
        assert!((lp(Family::M6, 1.0, 1.0, 1.0, 1.0) - (1.0 / std::f64::consts::PI).ln()).abs() < 1e-12);
        let a = lp(Family::M3, 2.0, 1.0, 0.5, 0.0);
        let b = lp(Family::M1, 2.0, 1.0, 0.5, 0.0);
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn half_gamma_ratio_series_joins_direct_form() {
        for x in [40.0f64, 55.0, 200.0] {
            let direct = crate::special::ln_gamma(x + 0.5) - crate::special::ln_gamma(x) - 0.5 * x.ln();
            assert!((half_gamma_ratio(x) - direct).abs() < 1e-12, "x={x}");
        }
        // far in the tail the log-t is the lognormal
        for x in [0.4, 1.0, 2.5] {
            assert!((lp(Family::M6, x, 1.2, 0.3, 1e12) - lp(Family::M1, x, 1.2, 0.3, 0.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn log_t_matches_statrs_student_t() {
        use statrs::distribution::{Continuous, StudentsT};
        for &(df, sigma) in &[(1.0, 1.0), (3.5, 0.4), (30.0, 0.2)] {
            let t = StudentsT::new(0.0, sigma, df).unwrap();
            for &x in &[0.3, 1.0, 2.7] {
                let mu: f64 = 1.4;
                let expected = t.ln_pdf(x.ln() - mu.ln()) - x.ln();
                assert!((lp(Family::M6, x, mu, sigma, df) - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn generalized_gamma_matches_gamma_and_exact_form() {
        // f3(x; μ, σ, σ) = f2(x; μ, σ^{-2})
        for &sigma in &[0.2, 0.5, 1.3] {
            for &x in &[0.1, 0.9, 3.0] {
                let gg = lp(Family::M3, x, 2.0, sigma, sigma);
                let g = lp(Family::M2, x, 2.0, 1.0 / (sigma * sigma), 0.0);
                assert!((gg - g).abs() < 1e-10, "sigma={sigma} x={x}");
            }
        }
        // direct evaluation of the printed density for a moderate τ
        let (x, mu, sigma, tau): (f64, f64, f64, f64) = (1.7, 1.1, 0.6, -0.8);
        let w = (x.ln() - mu.ln()) / sigma;
        let k = 1.0 / (tau * tau);
        let direct = tau.abs().ln() + k * k.ln() + k * (tau * w - (tau * w).exp())
            - (sigma * x).ln()
            - crate::special::ln_gamma(k);
        assert!((lp(Family::M3, x, mu, sigma, tau) - direct).abs() < 1e-12);
    }

    #[test]
    fn zero_handling() {
        assert!(logpdf_uv(Family::M1, UvEval::new(0.0, 1.0, 1.0)).is_err());
        assert!(logpdf_uv(Family::M2, UvEval::new(0.0, 1.0, 0.5)).is_err());
        assert_eq!(logpdf_uv(Family::M2, UvEval::new(0.0, 2.0, 1.0)).unwrap(), -(2f64.ln()));
        assert!(logpdf_uv(Family::M4, UvEval::new(0.0, 1.0, 0.3)).unwrap().is_finite());
        assert!(logpdf_uv(Family::M5, UvEval::new(0.0, 1.0, 0.3)).unwrap().is_finite());
        assert!(logpdf_uv(Family::M5, UvEval::new(-0.1, 1.0, 0.3)).is_err());
        let err = logpdf_uv(Family::M6, UvEval::new(-1.0, 1.0, 1.0).with_tau(2.0)).unwrap_err();
        assert!(err.to_string().contains("M6"));
    }

    #[test]
    fn moment_examples() {
        match moments_uv(Family::M1, 1.0, 1.0, 0.0) {
            Moments::Defined { mean, variance } => {
                assert!((mean - 1.648_721_270_700_128).abs() < 1e-12);
                assert!((variance - 4.670_774_270_471_604).abs() < 1e-12);
            }
            Moments::Undefined => panic!(),
        }
        assert_eq!(moments_uv(Family::M2, 3.0, 4.0, 0.0), Moments::Defined { mean: 3.0, variance: 2.25 });
        assert_eq!(moments_uv(Family::M6, 1.0, 1.0, 4.0), Moments::Undefined);
        // infinite mean for strongly negative shape
        assert_eq!(moments_uv(Family::M3, 1.0, 1.0, -2.0), Moments::Undefined);
    }

    #[test]
    fn sampler_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let m4: f64 = (0..n).map(|_| sample_uv(Family::M4, 1.0, 0.2, 0.0, &mut rng)).sum::<f64>() / n as f64;
        assert!((m4 - 1.0).abs() < 3.0 * 0.2 / (n as f64).sqrt());
        let draws: Vec<f64> = (0..n).map(|_| sample_uv(Family::M5, 1.0, 1.0, 0.0, &mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let Moments::Defined { mean: m, variance } = moments_uv(Family::M5, 1.0, 1.0, 0.0) else {
            panic!()
        };
        assert!((mean - m).abs() < 3.0 * (variance / n as f64).sqrt());
        assert!(draws.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn sampler_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            (0..10).map(|_| sample_uv(Family::M1, 2.0, 0.3, 0.0, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
