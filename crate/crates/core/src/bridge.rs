//! Change of variables between numbers-at-age and (proportions, total), and the
//! Jacobian correction that puts proportion-based likelihoods on the numbers
//! scale.

use nalgebra::DMatrix;

use crate::densities_mv::{
    ln_dirichlet, ln_logistic_normal_ar1, log_sum_exp, logpdf_composition, CompositionParams, LogratioKind,
};
use crate::densities_uv::ln_lognormal;
use crate::model_space::{CompositionKind, Family, FamilyClass};
use crate::{Error, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TotalKind {
    Numbers,
    Weight,
}

impl TotalKind {
    pub fn for_family(family: Family) -> Option<TotalKind> {
        match family.class() {
            FamilyClass::ProportionsWithNumbers => Some(TotalKind::Numbers),
            FamilyClass::ProportionsWithWeight => Some(TotalKind::Weight),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitObs {
    pub proportions: Vec<f64>,
    pub total: f64,
    pub total_kind: TotalKind,
    pub weights: Option<Vec<f64>>,
}

fn check_positive(x: &[f64], what: &str) -> Result<(), Error> {
    if x.is_empty() {
        return Err(Error::Dimension(format!("empty {what}")));
    }
    match x.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        Some(&bad) => Err(Error::Domain { family: "P@A".into(), value: bad, context: format!(" in {what}") }),
        None => Ok(()),
    }
}

fn weights_for<'a>(kind: TotalKind, weights: Option<&'a [f64]>, n: usize) -> Result<Option<&'a [f64]>, Error> {
    match kind {
        TotalKind::Numbers => Ok(None),
        TotalKind::Weight => {
            let w = weights.ok_or_else(|| Error::InvalidParameter("weight totals need catch weights".into()))?;
            if w.len() != n {
                return Err(Error::Dimension(format!("{} weights for {n} ages", w.len())));
            }
            check_positive(w, "catch weights")?;
            Ok(Some(w))
        }
    }
}

/// `g(x) = (x / Σx, Σx)`, or `Σ w x` as the total for weight data.
pub fn split_total(x: &[f64], kind: TotalKind, weights: Option<&[f64]>) -> Result<SplitObs, Error> {
    check_positive(x, "observation")?;
    let w = weights_for(kind, weights, x.len())?;
    let s: f64 = x.iter().sum();
    let total = match w {
        Some(w) => x.iter().zip(w).map(|(a, b)| a * b).sum(),
        None => s,
    };
    Ok(SplitObs {
        proportions: x.iter().map(|v| v / s).collect(),
        total,
        total_kind: kind,
        weights: w.map(|w| w.to_vec()),
    })
}

/// Inverse of [`split_total`].
pub fn combine(split: &SplitObs) -> Vec<f64> {
    let scale = match &split.weights {
        Some(w) => split.total / split.proportions.iter().zip(w).map(|(p, w)| p * w).sum::<f64>(),
        None => split.total,
    };
    split.proportions.iter().map(|p| p * scale).collect()
}

/// The Jacobian matrix of `g` as printed: rows `1..A−1` hold the proportion
/// derivatives, the last row holds the total's derivatives.
pub fn jacobian_matrix(x: &[f64], kind: TotalKind, weights: Option<&[f64]>) -> Result<DMatrix<f64>, Error> {
    check_positive(x, "observation")?;
    let w = weights_for(kind, weights, x.len())?;
    let a = x.len();
    let s: f64 = x.iter().sum();
    Ok(DMatrix::from_fn(a, a, |i, j| {
        if i == a - 1 {
            w.map_or(1.0, |w| w[j])
        } else {
            let d = if i == j { 1.0 / s } else { 0.0 };
            d - x[i] / (s * s)
        }
    }))
}

/// `log |det Dg(x)|` through an LU factorization of the printed matrix.
pub fn log_abs_det_jacobian(x: &[f64], kind: TotalKind, weights: Option<&[f64]>) -> Result<f64, Error> {
    let det = jacobian_matrix(x, kind, weights)?.lu().determinant();
    if !(det.abs() > 0.0) {
        return Err(Error::NonFinite("singular change of variables".into()));
    }
    Ok(det.abs().ln())
}

/// Closed form `det Dg = Σ w_i x_i / (Σ x)^A` (with `w ≡ 1` for numbers).
pub fn jacobian_det_closed_form(x: &[f64], weights: Option<&[f64]>) -> f64 {
    let s: f64 = x.iter().sum();
    let num: f64 = match weights {
        Some(w) => x.iter().zip(w).map(|(a, b)| a * b).sum(),
        None => s,
    };
    num / s.powi(x.len() as i32)
}

/// Parameters of a P@A observation: the composition density plus the scale
/// of the log-normal total.
#[derive(Clone, Debug, PartialEq)]
pub struct PaParams {
    pub composition: CompositionParams,
    pub total_sd: f64,
}

/// Numbers-scale log-likelihood of `x` under a P@A family, corrected by the
/// log-determinant of the change of variables.
pub fn corrected_obs_loglik(
    family: Family,
    x: &[f64],
    predicted: &[f64],
    params: &PaParams,
    weights: Option<&[f64]>,
) -> Result<f64, Error> {
    let kind = TotalKind::for_family(family)
        .ok_or_else(|| Error::InvalidParameter(format!("{family} is not a proportions family")))?;
    let comp = family.composition().expect("P@A family has a composition");
    if x.len() != predicted.len() {
        return Err(Error::Dimension("observed and predicted ages differ".into()));
    }
    let obs = split_total(x, kind, weights)?;
    let pred = split_total(predicted, kind, weights)?;
    let lp = logpdf_composition(comp, &obs.proportions, &pred.proportions, &params.composition)?;
    let lt = ln_lognormal(obs.total, pred.total.ln(), params.total_sd);
    Ok(lp + lt + log_abs_det_jacobian(x, kind, weights)?)
}

/// Composition scale on the model's working scale.
#[derive(Clone, Debug)]
pub enum PaScale<R> {
    LogisticNormal { sds: Vec<R>, rho: R },
    Dirichlet { concentration: R },
}

/// Generic form of [`corrected_obs_loglik`] used inside the joint likelihood.
/// `log_pred` are log predicted numbers; the AR(1) scale is applied directly.
pub fn ln_pa_obs<R: Real>(
    family: Family,
    x: &[f64],
    log_pred: &[R],
    weights: Option<&[f64]>,
    scale: &PaScale<R>,
    total_sd: R,
    jacobian: bool,
) -> R {
    let s: f64 = x.iter().sum();
    let p: Vec<f64> = x.iter().map(|v| v / s).collect();
    let comp = match (family.composition(), scale) {
        (Some(CompositionKind::Dirichlet), PaScale::Dirichlet { concentration }) => {
            ln_dirichlet(&p, log_pred, *concentration)
        }
        (Some(CompositionKind::AdditiveLogisticNormal), PaScale::LogisticNormal { sds, rho }) => {
            ln_logistic_normal_ar1(LogratioKind::Additive, &p, log_pred, sds, *rho)
        }
        (Some(CompositionKind::MultiplicativeLogisticNormal), PaScale::LogisticNormal { sds, rho }) => {
            ln_logistic_normal_ar1(LogratioKind::Multiplicative, &p, log_pred, sds, *rho)
        }
        _ => panic!("{family} does not match its composition scale"),
    };
    let (total, log_total_pred) = match weights {
        Some(w) => {
            let lw: Vec<R> = log_pred.iter().zip(w).map(|(&l, &wi)| l + wi.ln()).collect();
            (x.iter().zip(w).map(|(a, b)| a * b).sum(), log_sum_exp(&lw))
        }
        None => (s, log_sum_exp(log_pred)),
    };
    let mut out = comp + ln_lognormal(total, log_total_pred, total_sd);
    if jacobian {
        out = out + jacobian_det_closed_form(x, weights).ln();
    }
    out
}
