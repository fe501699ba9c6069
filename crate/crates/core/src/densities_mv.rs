//! AR(1) scale matrices, the multivariate log-normal (M7), logratio transforms
//! and the composition densities behind M8–M13.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::model_space::CompositionKind;
use crate::special::LN_SQRT_2PI;
use crate::{Error, Real};

/// Per-coordinate scales with a single AR(1) correlation.
#[derive(Clone, Debug, PartialEq)]
pub struct Ar1Scale {
    pub sds: Vec<f64>,
    pub rho: f64,
}

impl Ar1Scale {
    pub fn new(sds: Vec<f64>, rho: f64) -> Self {
        Ar1Scale { sds, rho }
    }
}

/// `Σ_ij = ρ^{|i−j|} σ_i σ_j`
pub fn ar1_covariance(scale: &Ar1Scale) -> DMatrix<f64> {
    let n = scale.sds.len();
    DMatrix::from_fn(n, n, |i, j| {
        scale.rho.powi((i as i32 - j as i32).abs()) * scale.sds[i] * scale.sds[j]
    })
}

/// Lower Cholesky factor of an AR(1) covariance in closed form.
pub fn ar1_cholesky(scale: &Ar1Scale) -> DMatrix<f64> {
    let n = scale.sds.len();
    let rho = scale.rho;
    let c = (1.0 - rho * rho).sqrt();
    // correlation factor: L_ij = ρ^{i−j} for j = 0, ρ^{i−j}·c for j > 0
    DMatrix::from_fn(n, n, |i, j| {
        if j > i {
            0.0
        } else {
            let r = rho.powi((i - j) as i32) * if j == 0 { 1.0 } else { c };
            r * scale.sds[i]
        }
    })
}

/// Log-density of `N(0, Σ)` for AR(1) `Σ` at `resid`, through the innovation
/// (Cholesky-whitened) form.
pub fn ln_ar1_normal<R: Real>(resid: &[R], sds: &[R], rho: R) -> R {
    let n = resid.len();
    debug_assert_eq!(n, sds.len());
    if n == 0 {
        return R::cst(0.0);
    }
    let one_m = -(rho * rho) + 1.0;
    let inv_c = one_m.powf(-0.5);
    let mut prev = resid[0] / sds[0];
    let mut quad = prev * prev;
    let mut log_sd = sds[0].ln();
    for i in 1..n {
        let z = resid[i] / sds[i];
        let e = (z - rho * prev) * inv_c;
        quad = quad + e * e;
        log_sd = log_sd + sds[i].ln();
        prev = z;
    }
    let log_det_half = log_sd + one_m.ln() * (0.5 * (n - 1) as f64);
    -(quad * 0.5) - log_det_half - LN_SQRT_2PI * n as f64
}

/// Multivariate log-normal with medians `exp(log_mu)` and AR(1) scale.
pub fn ln_mvlognormal_ar1<R: Real>(x: &[f64], log_mu: &[R], sds: &[R], rho: R) -> R {
    let resid: Vec<R> = x.iter().zip(log_mu).map(|(&xi, &m)| -m + xi.ln()).collect();
    let jac: f64 = x.iter().map(|v| v.ln()).sum();
    ln_ar1_normal(&resid, sds, rho) - jac
}

fn cholesky(sigma: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>, Error> {
    sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidParameter("scale matrix is not positive definite".into()))
}

/// Gaussian log-density of `resid` under a general covariance, via Cholesky.
fn ln_normal_dense(resid: &[f64], sigma: &DMatrix<f64>) -> Result<f64, Error> {
    let n = resid.len();
    if sigma.nrows() != n || sigma.ncols() != n {
        return Err(Error::Dimension(format!("{n} residuals vs {}x{} scale", sigma.nrows(), sigma.ncols())));
    }
    let chol = cholesky(sigma)?;
    let l = chol.l();
    let white = l
        .solve_lower_triangular(&DVector::from_column_slice(resid))
        .ok_or_else(|| Error::InvalidParameter("singular Cholesky factor".into()))?;
    let half_log_det: f64 = l.diagonal().iter().map(|d| d.ln()).sum();
    Ok(-0.5 * white.norm_squared() - half_log_det - LN_SQRT_2PI * n as f64)
}

/// f7 with a general scale matrix.
pub fn logpdf_mvlognormal(x: &[f64], mu: &[f64], sigma: &DMatrix<f64>) -> Result<f64, Error> {
    if x.len() != mu.len() {
        return Err(Error::Dimension(format!("x has {} entries, mu {}", x.len(), mu.len())));
    }
    if let Some(&bad) = x.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Domain { family: "M7".into(), value: bad, context: String::new() });
    }
    let resid: Vec<f64> = x.iter().zip(mu).map(|(a, m)| a.ln() - m.ln()).collect();
    Ok(ln_normal_dense(&resid, sigma)? - x.iter().map(|v| v.ln()).sum::<f64>())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogratioKind {
    Additive,
    Multiplicative,
}

fn check_simplex(p: &[f64]) -> Result<(), Error> {
    if p.len() < 2 {
        return Err(Error::Dimension("a composition needs at least two parts".into()));
    }
    if let Some(&bad) = p.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::Domain {
            family: "composition".into(),
            value: bad,
            context: ": proportions must be strictly positive".into(),
        });
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Domain { family: "composition".into(), value: s, context: ": must sum to 1".into() });
    }
    Ok(())
}

/// Additive or multiplicative logratio of a strictly positive composition.
pub fn logratio(kind: LogratioKind, p: &[f64]) -> Result<Vec<f64>, Error> {
    check_simplex(p)?;
    let logs: Vec<f64> = p.iter().map(|v| v.ln()).collect();
    Ok(logratio_from_logs(kind, &logs))
}

/// Logratio of the composition proportional to `exp(logs)`.
pub fn logratio_from_logs<R: Real>(kind: LogratioKind, logs: &[R]) -> Vec<R> {
    let a = logs.len();
    match kind {
        LogratioKind::Additive => logs[..a - 1].iter().map(|&l| l - logs[a - 1]).collect(),
        LogratioKind::Multiplicative => (0..a - 1).map(|k| logs[k] - log_sum_exp(&logs[k + 1..])).collect(),
    }
}

/// Inverse logratio; returns a point on the simplex.
pub fn inverse_logratio(kind: LogratioKind, y: &[f64]) -> Vec<f64> {
    match kind {
        LogratioKind::Additive => {
            let m = y.iter().fold(0.0f64, |m, v| m.max(*v));
            let mut p: Vec<f64> = y.iter().map(|v| (v - m).exp()).collect();
            p.push((-m).exp());
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= s);
            p
        }
        LogratioKind::Multiplicative => {
            // x_k = s_{k−1} · e^{y_k} / (1 + e^{y_k}), s the remaining mass
            let mut rest = 1.0;
            let mut p = Vec::with_capacity(y.len() + 1);
            for &v in y {
                let share = 1.0 / (1.0 + (-v).exp());
                let x = rest * share;
                p.push(x);
                rest *= 1.0 - share;
            }
            p.push(rest);
            p
        }
    }
}

pub fn log_sum_exp<R: Real>(xs: &[R]) -> R {
    let m = xs.iter().map(|v| v.value()).fold(f64::NEG_INFINITY, f64::max);
    let mut s = R::cst(0.0);
    for &x in xs {
        s = s + (x - m).exp();
    }
    s.ln() + m
}

/// f8/f9: logistic-normal log-density of composition `p` whose predicted
/// composition is proportional to `exp(log_pred)`, with AR(1) scale over the
/// logratio coordinates.
pub fn ln_logistic_normal_ar1<R: Real>(kind: LogratioKind, p: &[f64], log_pred: &[R], sds: &[R], rho: R) -> R {
    let lp: Vec<f64> = p.iter().map(|v| v.ln()).collect();
    let obs = logratio_from_logs(kind, &lp);
    let pred = logratio_from_logs(kind, log_pred);
    let resid: Vec<R> = obs.iter().zip(&pred).map(|(&o, &m)| -m + o).collect();
    ln_ar1_normal(&resid, sds, rho) - lp.iter().sum::<f64>()
}

/// f10: Dirichlet with concentrations `conc · π`, `π ∝ exp(log_pred)`.
pub fn ln_dirichlet<R: Real>(p: &[f64], log_pred: &[R], conc: R) -> R {
    let norm = log_sum_exp(log_pred);
    let mut out = conc.lgamma();
    for (&pi, &l) in p.iter().zip(log_pred) {
        let alpha = conc * (l - norm).exp();
        out = out - alpha.lgamma() + (alpha - 1.0) * pi.ln();
    }
    out
}

/// Parameters of a composition density on its natural scale.
#[derive(Clone, Debug, PartialEq)]
pub enum CompositionParams {
    /// `(A−1)×(A−1)` scale matrix over logratio coordinates.
    LogisticNormal(DMatrix<f64>),
    Dirichlet { concentration: f64 },
}

/// Log-density of composition `p` given predicted composition `pi`.
pub fn logpdf_composition(
    kind: CompositionKind,
    p: &[f64],
    pi: &[f64],
    params: &CompositionParams,
) -> Result<f64, Error> {
    check_simplex(p)?;
    check_simplex(pi)?;
    if p.len() != pi.len() {
        return Err(Error::Dimension("composition lengths differ".into()));
    }
    let lp: Vec<f64> = p.iter().map(|v| v.ln()).collect();
    let lpi: Vec<f64> = pi.iter().map(|v| v.ln()).collect();
    match (kind, params) {
        (CompositionKind::Dirichlet, CompositionParams::Dirichlet { concentration }) => {
            Ok(ln_dirichlet(p, &lpi, *concentration))
        }
        (CompositionKind::AdditiveLogisticNormal, CompositionParams::LogisticNormal(sigma))
        | (CompositionKind::MultiplicativeLogisticNormal, CompositionParams::LogisticNormal(sigma)) => {
            let lr = if kind == CompositionKind::AdditiveLogisticNormal {
                LogratioKind::Additive
            } else {
                LogratioKind::Multiplicative
            };
            let resid: Vec<f64> = logratio_from_logs(lr, &lp)
                .iter()
                .zip(logratio_from_logs(lr, &lpi))
                .map(|(o, m)| o - m)
                .collect();
            Ok(ln_normal_dense(&resid, sigma)? - lp.iter().sum::<f64>())
        }
        _ => Err(Error::InvalidParameter(format!("{kind:?} does not take {params:?}"))),
    }
}

fn correlated_normal<G: Rng + ?Sized>(chol: &DMatrix<f64>, rng: &mut G) -> DVector<f64> {
    let z = DVector::from_fn(chol.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    chol * z
}

/// Draw from a multivariate log-normal with medians `mu`.
pub fn sample_mvlognormal<G: Rng + ?Sized>(mu: &[f64], scale: &Ar1Scale, rng: &mut G) -> Vec<f64> {
    let e = correlated_normal(&ar1_cholesky(scale), rng);
    mu.iter().zip(e.iter()).map(|(m, v)| m * v.exp()).collect()
}

/// Draw a logistic-normal composition centred on `pi`.
pub fn sample_logistic_normal<G: Rng + ?Sized>(
    kind: LogratioKind,
    pi: &[f64],
    scale: &Ar1Scale,
    rng: &mut G,
) -> Vec<f64> {
    let logs: Vec<f64> = pi.iter().map(|v| v.ln()).collect();
    let centre = logratio_from_logs(kind, &logs);
    let e = correlated_normal(&ar1_cholesky(scale), rng);
    let y: Vec<f64> = centre.iter().zip(e.iter()).map(|(c, v)| c + v).collect();
    inverse_logratio(kind, &y)
}

/// Dirichlet draw through normalized equal-scale gamma variables.
pub fn sample_dirichlet<G: Rng + ?Sized>(pi: &[f64], concentration: f64, rng: &mut G) -> Vec<f64> {
    let g: Vec<f64> = pi
        .iter()
        .map(|&p| Gamma::new(concentration * p, 1.0).expect("valid gamma").sample(rng))
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Parameters accepted by [`sample_mv`].
#[derive(Clone, Debug, PartialEq)]
pub enum MvParams {
    Scale(Ar1Scale),
    Concentration(f64),
}

/// Draw from M7 (numbers) or the composition part of M8–M10 (proportions).
pub fn sample_mv<G: Rng + ?Sized>(
    family: crate::Family,
    centre: &[f64],
    params: &MvParams,
    rng: &mut G,
) -> Result<Vec<f64>, Error> {
    use crate::Family::*;
    match (family, params) {
        (M7, MvParams::Scale(s)) => Ok(sample_mvlognormal(centre, s, rng)),
        (M8 | M11, MvParams::Scale(s)) => Ok(sample_logistic_normal(LogratioKind::Additive, centre, s, rng)),
        (M9 | M12, MvParams::Scale(s)) => {
            Ok(sample_logistic_normal(LogratioKind::Multiplicative, centre, s, rng))
        }
        (M10 | M13, MvParams::Concentration(c)) => Ok(sample_dirichlet(centre, *c, rng)),
        _ => Err(Error::InvalidParameter(format!("{family} cannot be sampled with {params:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities_uv::ln_lognormal;
    use proptest::prelude::*;

    #[test]
    fn ar1_covariance_examples() {
        let id = ar1_covariance(&Ar1Scale::new(vec![1.0, 1.0], 0.0));
        assert_eq!(id, DMatrix::identity(2, 2));
        let s = ar1_covariance(&Ar1Scale::new(vec![1.0, 2.0], 0.5));
        assert_eq!(s, DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 4.0]));
        let scale = Ar1Scale::new(vec![0.3, 1.2, 0.7, 2.0], -0.85);
        let l = ar1_cholesky(&scale);
        assert!((&l * l.transpose() - ar1_covariance(&scale)).abs().max() < 1e-12);
        assert!(ar1_covariance(&scale).cholesky().is_some());
    }

    #[test]
    fn mvlognormal_examples() {
        let x = [1.3, 0.4];
        let val = logpdf_mvlognormal(&x, &x, &DMatrix::identity(2, 2)).unwrap();
        let expected = -(2.0 * std::f64::consts::PI).ln() - (x[0] * x[1]).ln();
        assert!((val - expected).abs() < 1e-12);
        assert!(logpdf_mvlognormal(&[1.0, 0.0], &[1.0, 1.0], &DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn logratio_examples() {
        let a = logratio(LogratioKind::Additive, &[0.25, 0.25, 0.5]).unwrap();
        for v in a {
            assert!((v + 2f64.ln()).abs() < 1e-15);
        }
        let m = logratio(LogratioKind::Multiplicative, &[0.2, 0.3, 0.5]).unwrap();
        assert!((m[0] - 0.25f64.ln()).abs() < 1e-15);
        assert!((m[1] - 0.6f64.ln()).abs() < 1e-15);
        assert!(logratio(LogratioKind::Additive, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn composition_examples() {
        let d = logpdf_composition(
            CompositionKind::Dirichlet,
            &[0.3, 0.7],
            &[0.5, 0.5],
            &CompositionParams::Dirichlet { concentration: 2.0 },
        )
        .unwrap();
        assert!(d.abs() < 1e-14);
        let p = [0.2, 0.3, 0.5];
        let v = logpdf_composition(
            CompositionKind::AdditiveLogisticNormal,
            &p,
            &p,
            &CompositionParams::LogisticNormal(DMatrix::identity(2, 2)),
        )
        .unwrap();
        let expected = -(2.0 * std::f64::consts::PI).ln() - (0.2f64 * 0.3 * 0.5).ln();
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn ar1_route_matches_dense_route() {
        let sds = [0.3, 0.8, 0.5, 1.1];
        let rho = 0.6;
        let x = [2.0, 0.7, 1.4, 3.3];
        let mu = [1.5, 1.0, 1.0, 2.0];
        let lm: Vec<f64> = mu.iter().map(|v: &f64| v.ln()).collect();
        let closed = ln_mvlognormal_ar1(&x, &lm, &sds, rho);
        let dense = logpdf_mvlognormal(&x, &mu, &ar1_covariance(&Ar1Scale::new(sds.to_vec(), rho))).unwrap();
        assert!((closed - dense).abs() < 1e-12);

        let p = [0.1, 0.2, 0.3, 0.4];
        let lpred = [0.5f64, 0.1, 0.9, 1.2];
        let pi: Vec<f64> = {
            let s: f64 = lpred.iter().map(|v| v.exp()).sum();
            lpred.iter().map(|v| v.exp() / s).collect()
        };
        for (lr, kind) in [
            (LogratioKind::Additive, CompositionKind::AdditiveLogisticNormal),
            (LogratioKind::Multiplicative, CompositionKind::MultiplicativeLogisticNormal),
        ] {
            let closed = ln_logistic_normal_ar1(lr, &p, &lpred, &sds[..3], rho);
            let cov = ar1_covariance(&Ar1Scale::new(sds[..3].to_vec(), rho));
            let dense = logpdf_composition(kind, &p, &pi, &CompositionParams::LogisticNormal(cov)).unwrap();
            assert!((closed - dense).abs() < 1e-12);
        }
    }

    fn spd(n: usize, seed: &[f64]) -> DMatrix<f64> {
        let b = DMatrix::from_fn(n, n, |i, j| seed[(i * n + j) % seed.len()]);
        &b * b.transpose() + DMatrix::identity(n, n) * 0.5
    }

    proptest! {
        #[test]
        fn dense_matches_explicit_inverse(seed in prop::collection::vec(-1.0f64..1.0, 9),
                                          x in prop::collection::vec(0.1f64..5.0, 3),
                                          mu in prop::collection::vec(0.1f64..5.0, 3)) {
            let sigma = spd(3, &seed);
            let r = DVector::from_iterator(3, x.iter().zip(&mu).map(|(a, m)| a.ln() - m.ln()));
            let inv = sigma.clone().try_inverse().unwrap();
            let oracle = -0.5 * (r.transpose() * inv * &r)[(0, 0)] - 0.5 * sigma.determinant().ln()
                - 1.5 * (2.0 * std::f64::consts::PI).ln() - x.iter().map(|v| v.ln()).sum::<f64>();
            let val = logpdf_mvlognormal(&x, &mu, &sigma).unwrap();
            prop_assert!((val - oracle).abs() < 1e-9);
        }

        #[test]
        fn diagonal_reduces_to_marginals(x in prop::collection::vec(0.1f64..5.0, 4),
                                         mu in prop::collection::vec(0.1f64..5.0, 4),
                                         sds in prop::collection::vec(0.1f64..2.0, 4)) {
            let sigma = DMatrix::from_diagonal(&DVector::from_iterator(4, sds.iter().map(|s| s * s)));
            let joint = logpdf_mvlognormal(&x, &mu, &sigma).unwrap();
            let sum: f64 = (0..4).map(|i| ln_lognormal(x[i], mu[i].ln(), sds[i])).sum();
            prop_assert!((joint - sum).abs() < 1e-10);
        }

        #[test]
        fn logratio_round_trip(raw in prop::collection::vec(0.01f64..1.0, 2..8)) {
            let s: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
            for kind in [LogratioKind::Additive, LogratioKind::Multiplicative] {
                let back = inverse_logratio(kind, &logratio(kind, &p).unwrap());
                for (a, b) in p.iter().zip(&back) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn exchangeable_permutation_invariance(raw in prop::collection::vec(0.05f64..1.0, 4),
                                               praw in prop::collection::vec(0.05f64..1.0, 4),
                                               sd in 0.1f64..1.5, conc in 0.5f64..20.0) {
            let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
            let p = norm(&raw);
            let pi = norm(&praw);
            let perm = [2usize, 0, 3, 1];
            let pp: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
            let ppi: Vec<f64> = perm.iter().map(|&i| pi[i]).collect();
            let sigma = DMatrix::identity(4, 4) * (sd * sd);
            let a = logpdf_mvlognormal(&p, &pi, &sigma).unwrap();
            let b = logpdf_mvlognormal(&pp, &ppi, &sigma).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
            let dp = CompositionParams::Dirichlet { concentration: conc };
            let a = logpdf_composition(CompositionKind::Dirichlet, &p, &pi, &dp).unwrap();
            let b = logpdf_composition(CompositionKind::Dirichlet, &pp, &ppi, &dp).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
