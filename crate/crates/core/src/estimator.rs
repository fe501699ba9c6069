//! Marginal maximum likelihood: outer quasi-Newton over θ on top of the
//! Laplace approximation, covariance from the outer Hessian, and delta-method
//! standard errors for derived quantities.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ad::{SweepBuffers, Tape};
use crate::data::Dataset;
use crate::densities_uv::GEN_GAMMA_SWITCH;
use crate::laplace::{InnerOptions, InnerSolution, Laplace, LatentModel};
use crate::model::{ModelSpec, ParamKind, StockModel};
use crate::model_space::{Family, ObsRole, Transform};
use crate::optim::{minimize_in_box, projected_gradient, LbfgsOptions, OptimStatus};
use crate::process::LatentStates;
use crate::special::LN_SQRT_2PI;
use crate::{Error, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    pub inner: InnerOptions,
    pub outer: LbfgsOptions,
    /// Restarts from perturbed points when the optimizer stops early.
    pub max_restarts: usize,
    /// Newton steps on the finite-difference Hessian after the optimizer.
    pub polish_steps: usize,
    /// Step of the central differences of the gradient.
    pub hessian_step: f64,
    pub seed: u64,
    /// Starting θ; `None` uses the model's default start.
    pub start: Option<Vec<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            inner: InnerOptions::default(),
            outer: LbfgsOptions::default(),
            max_restarts: 10,
            polish_steps: 10,
            hessian_step: 1e-4,
            seed: 1,
            start: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitStatus {
    Converged,
    /// Estimates returned, but the gradient criterion was not met.
    NotConverged,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Convergence {
    /// `max |∇θ|` at the estimate.
    pub gradient_norm: f64,
    pub inner_iterations: usize,
    pub outer_iterations: usize,
    pub evaluations: usize,
    pub restarts: usize,
    pub status: FitStatus,
}

/// A derived quantity with its delta-method standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Derived {
    pub year: i32,
    pub estimate: f64,
    pub se: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub names: Vec<String>,
    pub kinds: Vec<ParamKind>,
    pub transforms: Vec<Transform>,
    /// Estimates on the unconstrained scale.
    pub theta_hat: Vec<f64>,
    pub nll: f64,
    pub aic: f64,
    pub k: usize,
    pub n_process: usize,
    pub theta_cov: Option<DMatrix<f64>>,
    /// Parameters along flat directions of the likelihood (typically a
    /// variance at zero). They have zero rows in `theta_cov` and no standard
    /// error; the other entries are conditional on them.
    pub held_fixed: Vec<usize>,
    pub latents: LatentStates,
    /// Sds conditional on θ̂.
    pub latent_sds: LatentStates,
    /// Sds including θ uncertainty, when the covariance exists.
    pub latent_sds_total: Option<LatentStates>,
    pub fbar: Vec<Derived>,
    pub log_ssb: Vec<Derived>,
    /// Sum of the change-of-variables terms included in `nll`.
    pub log_jacobian: f64,
    pub convergence: Convergence,
}

impl FitResult {
    pub fn family(&self) -> Family {
        self.spec.family
    }

    pub fn converged(&self) -> bool {
        self.convergence.status == FitStatus::Converged
    }

    /// θ̂ on the natural scale.
    pub fn natural(&self) -> Vec<f64> {
        self.theta_hat.iter().zip(&self.transforms).map(|(&x, t)| t.from_unconstrained(x)).collect()
    }

    /// Standard errors of θ̂ on the unconstrained scale.
    pub fn theta_se(&self) -> Option<Vec<f64>> {
        self.theta_cov.as_ref().map(|c| {
            (0..c.nrows())
                .map(|i| if self.held_fixed.contains(&i) { f64::NAN } else { c[(i, i)].max(0.0).sqrt() })
                .collect()
        })
    }
}

/// Map from θ to named derived quantities.
pub trait Functional {
    fn names(&self) -> Vec<String>;
    fn eval<R: Real>(&self, theta: &[R]) -> Vec<R>;
}

/// Each coordinate of θ.
pub struct IdentityFunctional {
    pub names: Vec<String>,
}

impl Functional for IdentityFunctional {
    fn names(&self) -> Vec<String> {
        self.names.clone()
    }
    fn eval<R: Real>(&self, theta: &[R]) -> Vec<R> {
        theta.to_vec()
    }
}

/// Each coordinate of θ on the natural scale.
pub struct NaturalFunctional {
    pub names: Vec<String>,
    pub transforms: Vec<Transform>,
}

impl NaturalFunctional {
    pub fn for_fit(fit: &FitResult) -> Self {
        NaturalFunctional { names: fit.names.clone(), transforms: fit.transforms.clone() }
    }
}

impl Functional for NaturalFunctional {
    fn names(&self) -> Vec<String> {
        self.names.clone()
    }
    fn eval<R: Real>(&self, theta: &[R]) -> Vec<R> {
        theta.iter().zip(&self.transforms).map(|(&x, t)| t.apply(x)).collect()
    }
}

/// Marginal CV of `family` given its scale (and shape) on the natural scale.
pub fn cv_generic<R: Real>(family: Family, sigma: R, tau: Option<R>) -> Option<R> {
    let lognormal = |s: R| ((s * s).exp() - 1.0).sqrt();
    match family {
        Family::M1 | Family::M7 => Some(lognormal(sigma)),
        Family::M2 => Some(sigma.powf(-0.5)),
        Family::M3 => {
            let tau = tau?;
            if tau.value().abs() < GEN_GAMMA_SWITCH {
                return Some(lognormal(sigma));
            }
            let k = (tau * tau).recip();
            let r = sigma / tau;
            if (k + r * 2.0).value() <= 0.0 || (k + r).value() <= 0.0 {
                return None;
            }
            let ln_ratio = (k + r * 2.0).lgamma() + k.lgamma() - (k + r).lgamma() * 2.0;
            Some((ln_ratio.exp() - 1.0).sqrt())
        }
        Family::M4 => Some(sigma),
        Family::M5 => {
            let a = sigma.recip();
            let lambda = (-(a * a) * 0.5 - LN_SQRT_2PI - a.ln_norm_cdf()).exp();
            let var = -(a * lambda) - lambda * lambda + 1.0;
            Some(sigma * var.sqrt() / (sigma * lambda + 1.0))
        }
        _ => None,
    }
}

/// CVs of every observational scale parameter that has one.
pub struct ObsCvFunctional {
    family: Family,
    /// `(name, scale index, shape index)`
    entries: Vec<(String, usize, Option<usize>)>,
    transforms: Vec<Transform>,
}

impl ObsCvFunctional {
    pub fn for_fit(fit: &FitResult) -> Self {
        let family = fit.family();
        let mut entries = Vec::new();
        let shapes: Vec<usize> = (0..fit.names.len())
            .filter(|&i| fit.kinds[i] == ParamKind::Observation(ObsRole::Shape))
            .collect();
        for i in 0..fit.names.len() {
            if fit.kinds[i] != ParamKind::Observation(ObsRole::Scale) {
                continue;
            }
            let shape = match family {
                Family::M3 => {
                    // shapes follow the same fleet/age suffix as their scale
                    let suffix = fit.names[i].replacen(".scale", ".shape", 1);
                    shapes.iter().copied().find(|&j| fit.names[j] == suffix)
                }
                _ => None,
            };
            let probe = cv_generic(family, 0.3, shape.map(|_| 0.2));
            if probe.is_some() {
                entries.push((format!("cv.{}", fit.names[i].replacen(".scale", "", 1)), i, shape));
            }
        }
        ObsCvFunctional { family, entries, transforms: fit.transforms.clone() }
    }
}

impl Functional for ObsCvFunctional {
    fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.0.clone()).collect()
    }
    fn eval<R: Real>(&self, theta: &[R]) -> Vec<R> {
        self.entries
            .iter()
            .map(|(_, i, j)| {
                let sigma = self.transforms[*i].apply(theta[*i]);
                let tau = j.map(|j| self.transforms[j].apply(theta[j]));
                cv_generic(self.family, sigma, tau).unwrap_or(R::cst(f64::NAN))
            })
            .collect()
    }
}

/// Values and delta-method standard errors of `functional` at θ̂.
pub fn delta_se<F: Functional>(fit: &FitResult, functional: &F) -> Result<Vec<(String, f64, f64)>, Error> {
    let cov = fit
        .theta_cov
        .as_ref()
        .ok_or_else(|| Error::CovarianceUnavailable("outer Hessian was not positive definite".into()))?;
    let names = functional.names();
    let tape = Tape::new();
    let mut ws = SweepBuffers::default();
    let n = fit.theta_hat.len();
    let mut out = Vec::with_capacity(names.len());
    let mut g = vec![0.0; n];
    for (i, name) in names.into_iter().enumerate() {
        let vars = tape.inputs(&fit.theta_hat);
        let vals = functional.eval(&vars);
        let v = vals[i];
        tape.gradient(v, &mut g, &mut ws);
        let gv = DVector::from_column_slice(&g);
        let var = (gv.transpose() * cov * &gv)[(0, 0)];
        out.push((name, v.value(), var.max(0.0).sqrt()));
    }
    Ok(out)
}

/// Smoothed latent states and their sds (including θ uncertainty when the
/// covariance is available).
pub fn smooth_states(fit: &FitResult) -> (LatentStates, LatentStates) {
    (fit.latents.clone(), fit.latent_sds_total.clone().unwrap_or_else(|| fit.latent_sds.clone()))
}

/// Inner solutions kept for warm starts.
const WARM_CACHE: usize = 16;

struct Objective<'m> {
    lap: Laplace<'m, StockModel>,
    warm: Vec<f64>,
    start: Vec<f64>,
    /// Recent `(θ, û)` pairs; the nearest θ gives the first warm start.
    recent: VecDeque<(Vec<f64>, Vec<f64>)>,
    inner_iterations: usize,
    evaluations: usize,
}

impl<'m> Objective<'m> {
    fn solve(&mut self, theta: &[f64]) -> Option<(f64, InnerSolution)> {
        self.evaluations += 1;
        let distance = |t: &[f64]| t.iter().zip(theta).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let nearest = self
            .recent
            .iter()
            .min_by(|a, b| distance(&a.0).total_cmp(&distance(&b.0)))
            .map(|(_, u)| u.clone());
        let mut attempt = None;
        for u0 in nearest.iter().chain([&self.warm, &self.start]) {
            if let Ok((v, sol)) = self.lap.marginal_nll(theta, u0) {
                if v.is_finite() {
                    attempt = Some((v, sol));
                    break;
                }
            }
        }
        let (v, sol) = attempt?;
        self.inner_iterations += sol.iterations;
        self.warm.clone_from(&sol.u);
        if self.recent.len() == WARM_CACHE {
            self.recent.pop_front();
        }
        self.recent.push_back((theta.to_vec(), sol.u.clone()));
        Some((v, sol))
    }

    fn value_grad(&mut self, theta: &[f64]) -> Option<(f64, Vec<f64>)> {
        let (v, sol) = self.solve(theta)?;
        let g = self.lap.marginal_gradient(theta, &sol);
        g.iter().all(|x| x.is_finite()).then_some((v, g))
    }
}

/// Box on the working scale for a parameter of `kind`.
///
/// Variances stop at a thousandth of a unit and precision-like parameters
/// (degrees of freedom, gamma shape, Dirichlet concentration) at values where
/// the density is indistinguishable from its limit. Past these the likelihood
/// is flat to rounding and the optimizer would chase an asymptote.
pub fn working_bounds(family: Family, kind: ParamKind) -> (f64, f64) {
    let small = 1e-3f64.ln();
    let free = (f64::NEG_INFINITY, f64::INFINITY);
    match kind {
        ParamKind::FSd | ParamKind::RecruitmentSd | ParamKind::SurvivalSd => (small, f64::INFINITY),
        ParamKind::FCorrelation | ParamKind::Observation(ObsRole::Correlation) => {
            let edge = 1999f64.ln();
            (-edge, edge)
        }
        ParamKind::Observation(ObsRole::Scale) if family == Family::M2 => (f64::NEG_INFINITY, 1e6f64.ln()),
        ParamKind::Observation(ObsRole::Scale | ObsRole::TotalScale) => (small, f64::INFINITY),
        ParamKind::Observation(ObsRole::Shape) if family == Family::M6 => (f64::NEG_INFINITY, 1e4f64.ln()),
        ParamKind::Observation(ObsRole::Concentration) => (f64::NEG_INFINITY, 1e6f64.ln()),
        _ => free,
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Fits `spec` to `data` by Laplace-approximated marginal maximum likelihood.
pub fn fit(spec: &ModelSpec, data: &Dataset, options: &FitOptions) -> Result<FitResult, Error> {
    let model = StockModel::new(spec.clone(), data.clone())?;
    fit_model(&model, options)
}

/// Fits an already constructed model.
pub fn fit_model(model: &StockModel, options: &FitOptions) -> Result<FitResult, Error> {
    let start_u = model.initial_latents();
    let theta0 = match &options.start {
        Some(t) if t.len() == model.layout.len() => t.clone(),
        Some(t) => {
            return Err(Error::Dimension(format!("start has {} values, model {}", t.len(), model.layout.len())))
        }
        None => model.initial_theta(),
    };
    let mut obj = Objective {
        lap: Laplace::new(model, options.inner),
        warm: start_u.clone(),
        start: start_u,
        recent: VecDeque::new(),
        inner_iterations: 0,
        evaluations: 0,
    };
    if obj.value_grad(&theta0).is_none() {
        return Err(Error::NonFinite("marginal likelihood cannot be evaluated at the starting values".into()));
    }

    let bounds: Vec<(f64, f64)> = model.layout.kinds.iter().map(|&k| working_bounds(model.spec.family, k)).collect();

    // The quasi-Newton search stalls once value changes fall below rounding,
    // so Newton steps on the finite-difference Hessian finish the descent.
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let jitter = Normal::new(0.0, 0.1).expect("valid sd");
    let mut outer_iterations = 0;
    let mut restarts = 0;
    let mut from = theta0;
    let mut best: Option<Candidate> = None;
    loop {
        let run = minimize_in_box(|t| obj.value_grad(t), &from, &bounds, &options.outer);
        outer_iterations += run.iterations;
        if run.status != OptimStatus::EvaluationFailed {
            if let Some(c) = polish(&mut obj, run.x, &bounds, options) {
                let keep = match &best {
                    None => true,
                    Some(b) => c.converged(options) && !b.converged(options) || c.value < b.value,
                };
                if keep {
                    best = Some(c);
                }
            }
        }
        if best.as_ref().is_some_and(|b| b.converged(options)) || restarts >= options.max_restarts {
            break;
        }
        restarts += 1;
        let centre = best.as_ref().map_or(&from, |b| &b.theta);
        from = centre.iter().zip(&bounds).map(|(v, &(lo, hi))| (v + jitter.sample(&mut rng)).clamp(lo, hi)).collect();
    }
    let Candidate { theta, pgrad, hess, .. } =
        best.ok_or_else(|| Error::NonFinite("no evaluable estimate was found".into()))?;

    // final inner solve exactly at θ̂
    let (nll, sol) = obj.solve(&theta).ok_or_else(|| Error::NonFinite("at the estimate".into()))?;
    let gradient_norm = max_abs(&pgrad);
    let status =
        if gradient_norm < options.outer.grad_tol { FitStatus::Converged } else { FitStatus::NotConverged };
    // parameters held on a bound have no Wald interval
    let on_bound: Vec<usize> = (0..theta.len()).filter(|&i| pgrad[i] == 0.0 && (theta[i] == bounds[i].0 || theta[i] == bounds[i].1)).collect();
    let (theta_cov, held_fixed) = match hess.as_ref().and_then(|h| wald_covariance(h, on_bound)) {
        Some((c, fixed)) => (Some(c), fixed),
        None => (None, Vec::new()),
    };
    let k = theta.len();
    let summaries = summarize(&mut obj.lap, model, &theta, &sol, theta_cov.as_ref());
    let log_jacobian = if model.spec.jacobian_correction { model.log_jacobian_total() } else { 0.0 };
    Ok(FitResult {
        spec: model.spec.clone(),
        names: model.layout.names.clone(),
        kinds: model.layout.kinds.clone(),
        transforms: model.layout.transforms.clone(),
        theta_hat: theta,
        nll,
        aic: 2.0 * k as f64 + 2.0 * nll,
        k,
        n_process: model.layout.n_process(),
        theta_cov,
        held_fixed,
        latents: model.unpack(&sol.u),
        latent_sds: summaries.sds,
        latent_sds_total: summaries.sds_total,
        fbar: summaries.fbar,
        log_ssb: summaries.log_ssb,
        log_jacobian,
        convergence: Convergence {
            gradient_norm,
            inner_iterations: obj.inner_iterations,
            outer_iterations,
            evaluations: obj.evaluations,
            restarts,
            status,
        },
    })
}

struct Candidate {
    theta: Vec<f64>,
    value: f64,
    /// Gradient with coordinates held on a bound zeroed.
    pgrad: Vec<f64>,
    hess: Option<DMatrix<f64>>,
}

impl Candidate {
    fn converged(&self, options: &FitOptions) -> bool {
        max_abs(&self.pgrad) < options.outer.grad_tol
    }
}

/// Newton direction with the Hessian's eigenvalues floored at a small
/// fraction of the largest, so indefinite or nearly flat Hessians still give
/// a descent direction.
fn newton_step(h: &DMatrix<f64>, g: &[f64]) -> Option<DVector<f64>> {
    let g = DVector::from_column_slice(g);
    if let Some(ch) = h.clone().cholesky() {
        return Some(ch.solve(&g));
    }
    let eig = h.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(lmax > 0.0 && lmax.is_finite()) {
        return None;
    }
    let floor = 1e-8 * lmax;
    let coef = eig.eigenvectors.transpose() * &g;
    let scaled = DVector::from_iterator(coef.len(), coef.iter().zip(eig.eigenvalues.iter()).map(|(c, l)| c / l.abs().max(floor)));
    Some(&eig.eigenvectors * scaled)
}

/// Newton steps from `theta` while they reduce the gradient.
///
/// A parameter heading for an asymptote (a variance going to zero, degrees
/// of freedom going to infinity) sits on a tail where value, gradient and
/// curvature all decay like `e^{-x}`, and plain Newton advances only one unit
/// per step. Accepted steps are therefore doubled while the value keeps
/// falling. Coordinates held on a bound do not move.
fn polish(obj: &mut Objective<'_>, theta: Vec<f64>, bounds: &[(f64, f64)], options: &FitOptions) -> Option<Candidate> {
    let (value, grad) = obj.value_grad(&theta)?;
    let hess = outer_hessian(obj, &theta, options.hessian_step);
    let pgrad = projected_gradient(&theta, &grad, bounds);
    let mut c = Candidate { theta, value, pgrad, hess };
    let tol = 1e-9 * c.value.abs().max(1.0);
    for _ in 0..options.polish_steps {
        if max_abs(&c.pgrad) < options.outer.grad_tol * 1e-3 {
            break;
        }
        let free: Vec<usize> = (0..c.theta.len()).filter(|&i| c.pgrad[i] != 0.0).collect();
        let Some(h) = c.hess.as_ref() else { break };
        let sub = DMatrix::from_fn(free.len(), free.len(), |i, j| h[(free[i], free[j])]);
        let g: Vec<f64> = free.iter().map(|&i| c.pgrad[i]).collect();
        let Some(step) = newton_step(&sub, &g) else { break };
        let at = |m: f64| -> Vec<f64> {
            let mut t = c.theta.clone();
            for (k, &i) in free.iter().enumerate() {
                t[i] = (t[i] - m * step[k]).clamp(bounds[i].0, bounds[i].1);
            }
            t
        };
        let probe = |obj: &mut Objective<'_>, t: &[f64]| {
            obj.value_grad(t).map(|(v, g)| (v, projected_gradient(t, &g, bounds)))
        };
        let mut accepted = None;
        let mut mult = 1.0;
        while mult >= 1.0 / 16.0 {
            let trial = at(mult);
            if let Some((v, g)) = probe(obj, &trial) {
                if v <= c.value + tol && max_abs(&g) < max_abs(&c.pgrad) {
                    accepted = Some((trial, v, g));
                    break;
                }
            }
            mult *= 0.5;
        }
        let Some((mut theta, mut v, mut g)) = accepted else { break };
        if mult == 1.0 {
            for _ in 0..8 {
                mult *= 2.0;
                let trial = at(mult);
                if trial == theta {
                    break;
                }
                match probe(obj, &trial) {
                    Some((v2, g2)) if v2 < v - tol * 1e-3 && max_abs(&g2) <= max_abs(&g) => {
                        (theta, v, g) = (trial, v2, g2);
                    }
                    _ => break,
                }
            }
        }
        let hess = outer_hessian(obj, &theta, options.hessian_step);
        c = Candidate { theta, value: v, pgrad: g, hess };
    }
    Some(c)
}

/// Smallest eigenvalue, relative to the largest, of a usable Hessian.
const MIN_RELATIVE_CURVATURE: f64 = 1e-9;

/// Inverse of the outer Hessian without the coordinates in `fixed`. Further
/// coordinates that dominate a flat or negative direction are dropped one at
/// a time and the rest inverted; returns the covariance padded with zeros and
/// all dropped indices.
fn wald_covariance(h: &DMatrix<f64>, mut fixed: Vec<usize>) -> Option<(DMatrix<f64>, Vec<usize>)> {
    let n = h.nrows();
    let mut active: Vec<usize> = (0..n).filter(|i| !fixed.contains(i)).collect();
    while !active.is_empty() {
        let sub = DMatrix::from_fn(active.len(), active.len(), |i, j| h[(active[i], active[j])]);
        let eig = sub.clone().symmetric_eigen();
        let (imin, &lmin) = eig.eigenvalues.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1))?;
        let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(lmax > 0.0) || !lmax.is_finite() {
            return None;
        }
        if lmin > MIN_RELATIVE_CURVATURE * lmax {
            let inv = sub.cholesky()?.inverse();
            let mut cov = DMatrix::zeros(n, n);
            for (i, &a) in active.iter().enumerate() {
                for (j, &b) in active.iter().enumerate() {
                    cov[(a, b)] = inv[(i, j)];
                }
            }
            fixed.sort_unstable();
            return Some((cov, fixed));
        }
        let v = eig.eigenvectors.column(imin);
        let worst = (0..active.len()).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()))?;
        fixed.push(active.remove(worst));
    }
    None
}

/// Central differences of the exact gradient, symmetrized.
fn outer_hessian(obj: &mut Objective<'_>, theta: &[f64], h: f64) -> Option<DMatrix<f64>> {
    let n = theta.len();
    let mut m = DMatrix::zeros(n, n);
    let centre = obj.warm.clone();
    for j in 0..n {
        let mut tp = theta.to_vec();
        let mut tm = theta.to_vec();
        tp[j] += h;
        tm[j] -= h;
        obj.warm.clone_from(&centre);
        let (_, gp) = obj.value_grad(&tp)?;
        obj.warm.clone_from(&centre);
        let (_, gm) = obj.value_grad(&tm)?;
        for i in 0..n {
            m[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    obj.warm = centre;
    Some((&m + m.transpose()) * 0.5)
}

struct Summaries {
    sds: LatentStates,
    sds_total: Option<LatentStates>,
    fbar: Vec<Derived>,
    log_ssb: Vec<Derived>,
}

fn summarize(
    lap: &mut Laplace<'_, StockModel>,
    model: &StockModel,
    theta: &[f64],
    sol: &InnerSolution,
    cov: Option<&DMatrix<f64>>,
) -> Summaries {
    let z = sol.chol.selected_inverse();
    let n = model.n_latent();
    let cond: Vec<f64> = (0..n).map(|i| z.get(i, i).max(0.0).sqrt()).collect();
    // ∂û/∂θ only matters when θ uncertainty is propagated
    let sens = cov.map(|_| lap.latent_sensitivity(theta, sol));
    let total = match (&sens, cov) {
        (Some(s), Some(c)) => {
            let sm = DMatrix::from_fn(n, theta.len(), |i, j| s[j][i]);
            let extra = (&sm * c).component_mul(&sm).column_sum();
            Some((0..n).map(|i| (z.get(i, i) + extra[i]).max(0.0).sqrt()).collect::<Vec<f64>>())
        }
        _ => None,
    };
    let tape = Tape::new();
    let mut ws = SweepBuffers::default();
    let y0 = model.data.years().0;
    let mut fbar = Vec::new();
    let mut log_ssb = Vec::new();
    for y in 0..model.n_years() {
        let f_idx: Vec<usize> = (0..model.n_states()).map(|s| model.f_index(y, s)).collect();
        let n_idx: Vec<usize> = (0..model.n_ages()).map(|a| model.n_index(y, a)).collect();
        for (idx, is_f) in [(&f_idx, true), (&n_idx, false)] {
            let vals: Vec<f64> = idx.iter().map(|&i| sol.u[i]).collect();
            let vars = tape.inputs(&vals);
            let out = if is_f { model.fbar_generic(&vars) } else { model.log_ssb_generic(y, &vars) };
            let mut g = vec![0.0; idx.len()];
            tape.gradient(out, &mut g, &mut ws);
            let mut var = 0.0;
            for (r, &i) in idx.iter().enumerate() {
                for (c, &j) in idx.iter().enumerate() {
                    var += g[r] * z.get(i, j) * g[c];
                }
            }
            if let (Some(s), Some(c)) = (&sens, cov) {
                let d = DVector::from_fn(theta.len(), |j, _| idx.iter().zip(&g).map(|(&i, gi)| gi * s[j][i]).sum());
                var += (d.transpose() * c * &d)[(0, 0)];
            }
            let d = Derived { year: y0 + y as i32, estimate: out.value(), se: var.max(0.0).sqrt() };
            if is_f {
                fbar.push(d);
            } else {
                log_ssb.push(d);
            }
        }
    }
    Summaries { sds: model.unpack(&cond), sds_total: total.map(|t| model.unpack(&t)), fbar, log_ssb }
}
