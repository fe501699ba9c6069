//! The state-space stock model: parameter layout, latent indexing and the
//! joint negative log-likelihood as a sum of local terms.

use std::collections::BTreeMap;

use crate::bridge::{ln_pa_obs, PaScale};
use crate::data::Dataset;
use crate::densities_mv::{ln_mvlognormal_ar1, Ar1Scale};
use crate::densities_uv::{ln_gamma_mean, ln_gen_gamma, ln_log_t, ln_lognormal, ln_normal_cv, ln_trunc_normal_cv};
use crate::laplace::LatentModel;
use crate::model_space::{
    build_sharing_map, obs_transform, Family, FleetKind, ObsRole, ParamSharing, ShareMode, Transform,
};
use crate::process::{
    f_state_map, log_baranov, log_recruitment, log_survey_index, nll_f_step, nll_normal, ssb_generic, ProcessParams,
    Recruitment,
    DIFFUSE_SD,
};
use crate::{Error, Real};

pub use crate::process::{LatentStates, RecruitmentKind};

/// How survey catchabilities are shared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CatchabilitySharing {
    #[default]
    PerAge,
    PerFleet,
}

/// Everything that defines one model besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub family: Family,
    pub share_mode: ShareMode,
    pub recruitment: RecruitmentKind,
    /// Ages averaged in F-bar; `None` means all ages.
    pub fbar_ages: Option<(i32, i32)>,
    /// Number of F states `A*`; `None` gives each age its own state.
    pub f_states: Option<usize>,
    /// One F random-walk sd for all states instead of one per state.
    pub f_sd_shared: bool,
    pub catchability: CatchabilitySharing,
    /// Adds `log |det Dg|` to proportion-family likelihoods.
    pub jacobian_correction: bool,
}

impl ModelSpec {
    pub fn new(family: Family) -> Self {
        ModelSpec {
            family,
            share_mode: ShareMode::Full,
            recruitment: RecruitmentKind::RandomWalk,
            fbar_ages: None,
            f_states: None,
            f_sd_shared: true,
            catchability: CatchabilitySharing::PerAge,
            jacobian_correction: true,
        }
    }
}

/// What a fixed parameter controls.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    FSd,
    FCorrelation,
    RecruitmentSd,
    SurvivalSd,
    BevertonHoltA,
    BevertonHoltB,
    LogCatchability,
    Observation(ObsRole),
}

/// Names, kinds and transforms of the fixed parameters, in θ order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayout {
    pub names: Vec<String>,
    pub kinds: Vec<ParamKind>,
    pub transforms: Vec<Transform>,
    f_sd: Vec<usize>,
    f_rho: Option<usize>,
    rec_sd: usize,
    surv_sd: usize,
    bh: Option<(usize, usize)>,
    /// `(fleet, age)` → index; per-fleet sharing repeats the index.
    q: BTreeMap<(usize, i32), usize>,
    pub obs_offset: usize,
    pub sharing: ParamSharing,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Number of process (non-observational) parameters.
    pub fn n_process(&self) -> usize {
        self.obs_offset
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// θ on the natural scale.
    pub fn natural(&self, theta: &[f64]) -> Vec<f64> {
        theta.iter().zip(&self.transforms).map(|(&x, t)| t.from_unconstrained(x)).collect()
    }

    pub fn unconstrained(&self, natural: &[f64]) -> Result<Vec<f64>, Error> {
        natural.iter().zip(&self.transforms).map(|(&v, t)| t.to_unconstrained(v)).collect()
    }

    pub fn obs_index(&self, fleet: usize, age: Option<i32>, role: ObsRole) -> usize {
        self.obs_offset
            + self
                .sharing
                .index(fleet, age, role)
                .unwrap_or_else(|| panic!("unmapped observation key ({fleet}, {age:?}, {role:?})"))
    }

    pub fn q_index(&self, fleet: usize, age: i32) -> usize {
        self.q[&(fleet, age)]
    }
}

#[derive(Clone, Copy, Debug)]
enum Term {
    Diffuse,
    FStep,
    Recruit { y: usize },
    Survival { y: usize, a: usize },
    Plus { y: usize },
    ObsAge { fleet: usize, y: usize, k: usize },
    ObsFleet { fleet: usize, y: usize },
}

/// A model bound to a dataset.
#[derive(Clone, Debug)]
pub struct StockModel {
    pub spec: ModelSpec,
    pub data: Dataset,
    pub layout: ParamLayout,
    n_years: usize,
    n_ages: usize,
    n_states: usize,
    smap: Vec<usize>,
    fbar_range: (usize, usize),
    m: Vec<Vec<f64>>,
    maturity: Vec<Vec<f64>>,
    stock_weight: Vec<Vec<f64>>,
    kinds: Vec<Term>,
    locals: Vec<Vec<usize>>,
    /// Positions in `locals` of each term's latents in semantic order.
    slots: Vec<Vec<usize>>,
    bandwidth: usize,
}

fn collect_years(g: &crate::data::YearAgeGrid) -> Vec<Vec<f64>> {
    (g.years.0..=g.years.1).map(|y| g.row(y).to_vec()).collect()
}

impl StockModel {
    pub fn new(spec: ModelSpec, data: Dataset) -> Result<Self, Error> {
        data.validate()?;
        data.check_family(spec.family)?;
        let (first_age, last_age) = data.ages();
        let n_ages = data.n_ages();
        let n_years = data.n_years();
        let n_states = spec.f_states.unwrap_or(n_ages);
        if n_states == 0 || n_states > n_ages {
            return Err(Error::Config(format!("F states must lie in 1..={n_ages}")));
        }
        let fbar_ages = spec.fbar_ages.unwrap_or((first_age, last_age));
        if fbar_ages.0 > fbar_ages.1 || fbar_ages.0 < first_age || fbar_ages.1 > last_age {
            return Err(Error::Config(format!("F-bar ages {fbar_ages:?} outside {first_age}-{last_age}")));
        }
        let layout = build_layout(&spec, &data, n_states);
        let mut model = StockModel {
            fbar_range: ((fbar_ages.0 - first_age) as usize, (fbar_ages.1 - first_age) as usize),
            smap: f_state_map(n_ages, n_states),
            m: collect_years(&data.biology.natural_mortality),
            maturity: collect_years(&data.biology.maturity),
            stock_weight: collect_years(&data.biology.stock_weight),
            spec,
            data,
            layout,
            n_years,
            n_ages,
            n_states,
            kinds: Vec::new(),
            locals: Vec::new(),
            slots: Vec::new(),
            bandwidth: 0,
        };
        model.build_terms();
        Ok(model)
    }

    pub fn n_years(&self) -> usize {
        self.n_years
    }

    pub fn n_ages(&self) -> usize {
        self.n_ages
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn state_of_age(&self) -> &[usize] {
        &self.smap
    }

    pub fn fbar_range(&self) -> (usize, usize) {
        self.fbar_range
    }

    fn stride(&self) -> usize {
        self.n_states + self.n_ages
    }

    pub fn f_index(&self, y: usize, s: usize) -> usize {
        y * self.stride() + s
    }

    pub fn n_index(&self, y: usize, a: usize) -> usize {
        y * self.stride() + self.n_states + a
    }

    fn push(&mut self, kind: Term, sem: Vec<usize>) {
        let mut locals = sem.clone();
        locals.sort_unstable();
        locals.dedup();
        let slots = sem.iter().map(|i| locals.binary_search(i).unwrap()).collect();
        self.bandwidth = self.bandwidth.max(locals[locals.len() - 1] - locals[0]);
        self.kinds.push(kind);
        self.locals.push(locals);
        self.slots.push(slots);
    }

    fn build_terms(&mut self) {
        let (na, ns, ny) = (self.n_ages, self.n_states, self.n_years);
        for i in 0..self.stride() {
            self.push(Term::Diffuse, vec![i]);
        }
        let y0 = self.data.years().0;
        for y in 0..ny {
            if y > 0 {
                let sem = (0..ns).map(|s| self.f_index(y - 1, s)).chain((0..ns).map(|s| self.f_index(y, s))).collect();
                self.push(Term::FStep, sem);
                let sem = match self.spec.recruitment {
                    RecruitmentKind::RandomWalk => vec![self.n_index(y - 1, 0), self.n_index(y, 0)],
                    RecruitmentKind::BevertonHolt => {
                        let mut s: Vec<usize> = (0..na).map(|a| self.n_index(y - 1, a)).collect();
                        s.push(self.n_index(y, 0));
                        s
                    }
                };
                self.push(Term::Recruit { y }, sem);
                for a in 1..na - 1 {
                    let sem = vec![
                        self.f_index(y - 1, self.smap[a - 1]),
                        self.n_index(y - 1, a - 1),
                        self.n_index(y, a),
                    ];
                    self.push(Term::Survival { y, a }, sem);
                }
                let sem = vec![
                    self.f_index(y - 1, self.smap[na - 2]),
                    self.f_index(y - 1, self.smap[na - 1]),
                    self.n_index(y - 1, na - 2),
                    self.n_index(y - 1, na - 1),
                    self.n_index(y, na - 1),
                ];
                self.push(Term::Plus { y }, sem);
            }
            let year = y0 + y as i32;
            for fleet in 0..self.data.fleets.len() {
                if self.data.usable(fleet, year).is_none() {
                    continue;
                }
                let fs = &self.data.fleets[fleet];
                let ages: Vec<usize> = fs.ages().map(|a| (a - self.data.ages().0) as usize).collect();
                if self.spec.family.index() <= 6 {
                    for (k, &a) in ages.iter().enumerate() {
                        let sem = vec![self.f_index(y, self.smap[a]), self.n_index(y, a)];
                        self.push(Term::ObsAge { fleet, y, k }, sem);
                    }
                } else {
                    let mut sem: Vec<usize> = ages.iter().map(|&a| self.f_index(y, self.smap[a])).collect();
                    sem.extend(ages.iter().map(|&a| self.n_index(y, a)));
                    self.push(Term::ObsFleet { fleet, y }, sem);
                }
            }
        }
    }

    /// Log prediction of fleet `fleet` at global age index `a`.
    fn log_pred<R: Real>(&self, fleet: usize, y: usize, a: usize, log_f: R, log_n: R, theta: &[R]) -> R {
        let fs = &self.data.fleets[fleet];
        let m = self.m[y][a];
        match fs.kind {
            FleetKind::Commercial => log_baranov(log_f, m, log_n),
            FleetKind::Survey => {
                let age = self.data.ages().0 + a as i32;
                log_survey_index(theta[self.layout.q_index(fleet, age)], log_f, m, log_n, fs.timing)
            }
        }
    }

    fn obs_param<R: Real>(&self, theta: &[R], fleet: usize, age: Option<i32>, role: ObsRole) -> R {
        let i = self.layout.obs_index(fleet, age, role);
        self.layout.transforms[i].apply(theta[i])
    }

    /// Per-age scales and correlation of a correlated family for one fleet.
    fn ar1_params<R: Real>(&self, theta: &[R], fleet: usize, n: usize) -> (Vec<R>, R) {
        let fs = &self.data.fleets[fleet];
        let sds = fs.ages().take(n).map(|age| self.obs_param(theta, fleet, Some(age), ObsRole::Scale)).collect();
        (sds, self.obs_param(theta, fleet, None, ObsRole::Correlation))
    }

    fn f_sds<R: Real>(&self, theta: &[R]) -> Vec<R> {
        self.layout.f_sd.iter().cycle().take(self.n_states).map(|&i| theta[i].exp()).collect()
    }

    fn recruitment<R: Real>(&self, theta: &[R]) -> Recruitment<R> {
        match self.layout.bh {
            None => Recruitment::RandomWalk,
            Some((a, b)) => Recruitment::BevertonHolt { a: theta[a].exp(), b: theta[b].exp() },
        }
    }

    fn term_nll<R: Real>(&self, t: usize, u: &[R], theta: &[R]) -> R {
        let sl = &self.slots[t];
        let at = |k: usize| u[sl[k]];
        match self.kinds[t] {
            Term::Diffuse => nll_normal(u[0], R::cst(0.0), R::cst(DIFFUSE_SD)),
            Term::FStep => {
                let ns = self.n_states;
                let prev: Vec<R> = (0..ns).map(at).collect();
                let cur: Vec<R> = (ns..2 * ns).map(at).collect();
                let rho = self.layout.f_rho.map_or(R::cst(0.0), |i| Transform::Squash.apply(theta[i]));
                nll_f_step(&prev, &cur, &self.f_sds(theta), rho)
            }
            Term::Recruit { y } => {
                let sd = theta[self.layout.rec_sd].exp();
                let rec = self.recruitment(theta);
                match rec {
                    Recruitment::RandomWalk => nll_normal(at(1), at(0), sd),
                    Recruitment::BevertonHolt { .. } => {
                        let prev: Vec<R> = (0..self.n_ages).map(at).collect();
                        let s = ssb_generic(&prev, &self.maturity[y - 1], &self.stock_weight[y - 1]);
                        let lr = log_recruitment(&rec, prev[0], s);
                        nll_normal(at(self.n_ages), lr, sd)
                    }
                }
            }
            Term::Survival { y, a } => {
                let mean = at(1) - at(0).exp() - self.m[y - 1][a - 1];
                nll_normal(at(2), mean, theta[self.layout.surv_sd].exp())
            }
            Term::Plus { y } => {
                let na = self.n_ages;
                let x = at(2) - at(0).exp() - self.m[y - 1][na - 2];
                let z = at(3) - at(1).exp() - self.m[y - 1][na - 1];
                let (hi, lo) = if x.value() >= z.value() { (x, z) } else { (z, x) };
                let mean = hi + (lo - hi).exp().ln_1p();
                nll_normal(at(4), mean, theta[self.layout.surv_sd].exp())
            }
            Term::ObsAge { fleet, y, k } => {
                let fs = &self.data.fleets[fleet];
                let year = self.data.years().0 + y as i32;
                let x = self.data.usable(fleet, year).expect("usable year")[k];
                let age = fs.first_age + k as i32;
                let a = (age - self.data.ages().0) as usize;
                let lp = self.log_pred(fleet, y, a, at(0), at(1), theta);
                let sigma = self.obs_param(theta, fleet, Some(age), ObsRole::Scale);
                let ll = match self.spec.family {
                    Family::M1 => ln_lognormal(x, lp, sigma),
                    Family::M2 => ln_gamma_mean(x, lp, sigma),
                    Family::M3 => {
                        ln_gen_gamma(x, lp, sigma, self.obs_param(theta, fleet, Some(age), ObsRole::Shape))
                    }
                    Family::M4 => ln_normal_cv(x, lp.exp(), sigma),
                    Family::M5 => ln_trunc_normal_cv(x, lp.exp(), sigma),
                    Family::M6 => ln_log_t(x, lp, sigma, self.obs_param(theta, fleet, Some(age), ObsRole::Shape)),
                    other => unreachable!("{other} is not univariate"),
                };
                -ll
            }
            Term::ObsFleet { fleet, y } => {
                let fs = &self.data.fleets[fleet];
                let year = self.data.years().0 + y as i32;
                let x = self.data.usable(fleet, year).expect("usable year");
                let na = fs.n_ages();
                let a0 = (fs.first_age - self.data.ages().0) as usize;
                let lp: Vec<R> = (0..na).map(|k| self.log_pred(fleet, y, a0 + k, at(k), at(na + k), theta)).collect();
                let family = self.spec.family;
                let ll = match family {
                    Family::M7 => {
                        let (sds, rho) = self.ar1_params(theta, fleet, na);
                        ln_mvlognormal_ar1(x, &lp, &sds, rho)
                    }
                    _ => {
                        let scale = match family {
                            Family::M10 | Family::M13 => PaScale::Dirichlet {
                                concentration: self.obs_param(theta, fleet, None, ObsRole::Concentration),
                            },
                            _ => {
                                let (sds, rho) = self.ar1_params(theta, fleet, na - 1);
                                PaScale::LogisticNormal { sds, rho }
                            }
                        };
                        let weights: Option<Vec<f64>> = matches!(family, Family::M11 | Family::M12 | Family::M13)
                            .then(|| {
                                let g = self.data.biology.catch_weight_for(&fs.name);
                                fs.ages().map(|age| g.at(year, age)).collect()
                            });
                        let total_sd = self.obs_param(theta, fleet, None, ObsRole::TotalScale);
                        ln_pa_obs(
                            family,
                            x,
                            &lp,
                            weights.as_deref(),
                            &scale,
                            total_sd,
                            self.spec.jacobian_correction,
                        )
                    }
                };
                -ll
            }
        }
    }

    /// Whether term `t` is an observation term.
    pub fn is_observation_term(&self, t: usize) -> bool {
        matches!(self.kinds[t], Term::ObsAge { .. } | Term::ObsFleet { .. })
    }

    /// Packs latent states into the latent vector.
    pub fn pack(&self, states: &LatentStates) -> Vec<f64> {
        let mut u = vec![0.0; self.n_years * self.stride()];
        for y in 0..self.n_years {
            for s in 0..self.n_states {
                u[self.f_index(y, s)] = states.log_f[y][s];
            }
            for a in 0..self.n_ages {
                u[self.n_index(y, a)] = states.log_n[y][a];
            }
        }
        u
    }

    pub fn unpack(&self, u: &[f64]) -> LatentStates {
        LatentStates {
            log_f: (0..self.n_years).map(|y| (0..self.n_states).map(|s| u[self.f_index(y, s)]).collect()).collect(),
            log_n: (0..self.n_years).map(|y| (0..self.n_ages).map(|a| u[self.n_index(y, a)]).collect()).collect(),
        }
    }

    /// Joint negative log-likelihood of θ and latent states.
    pub fn joint_nll(&self, theta: &[f64], states: &LatentStates) -> f64 {
        let (process, obs) = self.joint_parts(theta, &self.pack(states));
        process + obs
    }

    /// (process, observation) parts of the joint nll.
    pub fn joint_parts(&self, theta: &[f64], u: &[f64]) -> (f64, f64) {
        let mut parts = (0.0, 0.0);
        let mut local = Vec::new();
        for t in 0..self.kinds.len() {
            local.clear();
            local.extend(self.locals[t].iter().map(|&i| u[i]));
            let v = self.term_nll(t, &local, theta);
            if self.is_observation_term(t) {
                parts.1 += v;
            } else {
                parts.0 += v;
            }
        }
        parts
    }

    /// Sum over usable P@A fleet-years of `log |det Dg|`, zero otherwise.
    pub fn log_jacobian_total(&self) -> f64 {
        let family = self.spec.family;
        if !family.is_proportions() {
            return 0.0;
        }
        let weighted = matches!(family, Family::M11 | Family::M12 | Family::M13);
        let mut total = 0.0;
        for (f, fs) in self.data.fleets.iter().enumerate() {
            for &year in self.data.observations[f].keys() {
                if let Some(x) = self.data.usable(f, year) {
                    let w: Option<Vec<f64>> = weighted.then(|| {
                        let g = self.data.biology.catch_weight_for(&fs.name);
                        fs.ages().map(|age| g.at(year, age)).collect()
                    });
                    total += crate::bridge::jacobian_det_closed_form(x, w.as_deref()).ln();
                }
            }
        }
        total
    }

    /// Starting latents: log F at log 0.3, log N by inverting the catch
    /// equation at that F.
    pub fn initial_latents(&self) -> Vec<f64> {
        let f0 = 0.3f64;
        let (y0, a0) = (self.data.years().0, self.data.ages().0);
        let mut sums = vec![vec![0.0; self.n_ages]; self.n_years];
        let mut seen = vec![vec![false; self.n_ages]; self.n_years];
        for (f, fs) in self.data.fleets.iter().enumerate() {
            if fs.kind != FleetKind::Commercial {
                continue;
            }
            for (&year, _) in &self.data.observations[f] {
                let Some(x) = self.data.usable(f, year) else { continue };
                let y = (year - y0) as usize;
                for (k, &c) in x.iter().enumerate() {
                    let a = (fs.first_age - a0) as usize + k;
                    if c > 0.0 {
                        sums[y][a] += c;
                        seen[y][a] = true;
                    }
                }
            }
        }
        let mut log_n = vec![vec![f64::NAN; self.n_ages]; self.n_years];
        for y in 0..self.n_years {
            for a in 0..self.n_ages {
                if seen[y][a] {
                    let z = f0 + self.m[y][a];
                    let share = f0 / z * -(-z).exp_m1();
                    log_n[y][a] = (sums[y][a] / share).ln();
                }
            }
        }
        // fill gaps per age from the nearest observed year
        for a in 0..self.n_ages {
            let known: Vec<usize> = (0..self.n_years).filter(|&y| log_n[y][a].is_finite()).collect();
            for y in 0..self.n_years {
                if !log_n[y][a].is_finite() {
                    log_n[y][a] = known
                        .iter()
                        .min_by_key(|&&k| k.abs_diff(y))
                        .map_or(10.0 - a as f64 * 0.5, |&k| log_n[k][a]);
                }
            }
        }
        // older ages follow their cohort so survival residuals start at zero;
        // otherwise the joint is far from convex in log F at the start
        let f_row = vec![f0.ln(); self.n_ages];
        for y in 1..self.n_years {
            let next = crate::process::log_survivors(&log_n[y - 1], &f_row, &self.m[y - 1]);
            log_n[y][1..].copy_from_slice(&next);
        }
        let states = LatentStates { log_f: vec![vec![f0.ln(); self.n_states]; self.n_years], log_n };
        self.pack(&states)
    }

    /// Starting θ: scales 0.5, correlations 0, log q from the data, and
    /// Beverton-Holt parameters from a grid over the SSB range.
    pub fn initial_theta(&self) -> Vec<f64> {
        let l = &self.layout;
        let mut theta = vec![0.0; l.len()];
        for (i, kind) in l.kinds.iter().enumerate() {
            theta[i] = match kind {
                ParamKind::FSd | ParamKind::RecruitmentSd | ParamKind::SurvivalSd => 0.5f64.ln(),
                ParamKind::FCorrelation => 0.0,
                ParamKind::Observation(role) => match (self.spec.family, role) {
                    (_, ObsRole::Correlation) => 0.0,
                    (Family::M2, ObsRole::Scale) => 4.0f64.ln(),
                    (Family::M3, ObsRole::Shape) => 0.0,
                    (Family::M6, ObsRole::Shape) => 5.0f64.ln(),
                    (_, ObsRole::Concentration) => 10.0f64.ln(),
                    _ => 0.5f64.ln(),
                },
                _ => 0.0,
            };
        }
        let u = self.initial_latents();
        let states = self.unpack(&u);
        let (y0, a0) = (self.data.years().0, self.data.ages().0);
        // log q: mean log ratio of index to start-of-year abundance
        let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for (f, fs) in self.data.fleets.iter().enumerate() {
            if fs.kind != FleetKind::Survey {
                continue;
            }
            for &year in self.data.observations[f].keys() {
                let Some(x) = self.data.usable(f, year) else { continue };
                let y = (year - y0) as usize;
                for (age, &v) in fs.ages().zip(x) {
                    if v > 0.0 {
                        let a = (age - a0) as usize;
                        let e = acc.entry(l.q_index(f, age)).or_insert((0.0, 0));
                        e.0 += v.ln() - states.log_n[y][a];
                        e.1 += 1;
                    }
                }
            }
        }
        for (i, (s, n)) in acc {
            theta[i] = s / n as f64;
        }
        if let Some((ia, ib)) = l.bh {
            let (la, lb) = self.bh_grid(&states);
            theta[ia] = la;
            theta[ib] = lb;
        }
        theta
    }

    fn bh_grid(&self, states: &LatentStates) -> (f64, f64) {
        let ssb: Vec<f64> = (0..self.n_years)
            .map(|y| {
                let n: Vec<f64> = states.log_n[y].iter().map(|v| v.exp()).collect();
                crate::process::ssb(&n, &self.maturity[y], &self.stock_weight[y])
            })
            .collect();
        let smax = ssb.iter().cloned().fold(1e-12, f64::max);
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for k in -20..=20 {
            let b = 10f64.powf(k as f64 * 0.2) / smax;
            let resid: Vec<f64> = (1..self.n_years)
                .map(|y| states.log_n[y][0] - ssb[y - 1].ln() + (b * ssb[y - 1]).ln_1p())
                .collect();
            let la = resid.iter().sum::<f64>() / resid.len() as f64;
            let sse: f64 = resid.iter().map(|r| (r - la).powi(2)).sum();
            if sse < best.0 {
                best = (sse, la, b.ln());
            }
        }
        (best.1, best.2)
    }

    /// Natural-scale process parameters at θ.
    pub fn process_params(&self, theta: &[f64]) -> ProcessParams {
        let rho = self.layout.f_rho.map_or(0.0, |i| Transform::Squash.from_unconstrained(theta[i]));
        ProcessParams {
            f_scale: Ar1Scale::new(self.f_sds(theta), rho),
            survival_sd: theta[self.layout.surv_sd].exp(),
            recruitment: self.recruitment(theta),
            rec_sd: theta[self.layout.rec_sd].exp(),
        }
    }

    /// Natural mortality, maturity and stock weight rows of year index `y`.
    pub fn biology_row(&self, y: usize) -> (&[f64], &[f64], &[f64]) {
        (&self.m[y], &self.maturity[y], &self.stock_weight[y])
    }

    /// Log predictions of `fleet` in year index `y`, one per fleet age.
    pub fn log_predictions(&self, theta: &[f64], states: &LatentStates, fleet: usize, y: usize) -> Vec<f64> {
        let fs = &self.data.fleets[fleet];
        let a0 = (fs.first_age - self.data.ages().0) as usize;
        (a0..a0 + fs.n_ages())
            .map(|a| self.log_pred(fleet, y, a, states.log_f[y][self.smap[a]], states.log_n[y][a], theta))
            .collect()
    }

    /// Natural value of an observation parameter.
    pub fn obs_value(&self, theta: &[f64], fleet: usize, age: Option<i32>, role: ObsRole) -> f64 {
        self.obs_param(theta, fleet, age, role)
    }

    /// F-bar of year `y` from log F states.
    pub fn fbar_generic<R: Real>(&self, log_f_states: &[R]) -> R {
        let sel: Vec<R> = (self.fbar_range.0..=self.fbar_range.1).map(|a| log_f_states[self.smap[a]]).collect();
        crate::process::fbar_generic(&sel)
    }

    /// `log SSB` of year `y` from log N.
    pub fn log_ssb_generic<R: Real>(&self, y: usize, log_n: &[R]) -> R {
        ssb_generic(log_n, &self.maturity[y], &self.stock_weight[y]).ln()
    }
}

impl LatentModel for StockModel {
    fn n_latent(&self) -> usize {
        self.n_years * self.stride()
    }

    fn n_theta(&self) -> usize {
        self.layout.len()
    }

    fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    fn terms(&self) -> &[Vec<usize>] {
        &self.locals
    }

    fn eval_term<R: Real>(&self, t: usize, u: &[R], theta: &[R]) -> R {
        self.term_nll(t, u, theta)
    }

    fn describe_latent(&self, i: usize) -> String {
        let y = i / self.stride();
        let r = i % self.stride();
        let year = self.data.years().0 + y as i32;
        if r < self.n_states {
            format!("year {year}, log F state {r}")
        } else {
            format!("year {year}, log N age {}", self.data.ages().0 + (r - self.n_states) as i32)
        }
    }
}

fn build_layout(spec: &ModelSpec, data: &Dataset, n_states: usize) -> ParamLayout {
    let mut entries: Vec<(String, ParamKind, Transform)> = Vec::new();
    let mut push = |name: String, kind: ParamKind, tr: Transform| {
        entries.push((name, kind, tr));
        entries.len() - 1
    };
    let f_sd = if spec.f_sd_shared {
        vec![push("logsd_F".into(), ParamKind::FSd, Transform::Log)]
    } else {
        (0..n_states).map(|s| push(format!("logsd_F.{s}"), ParamKind::FSd, Transform::Log)).collect()
    };
    let f_rho = (n_states >= 2).then(|| push("rho_F".into(), ParamKind::FCorrelation, Transform::Squash));
    let rec_sd = push("logsd_R".into(), ParamKind::RecruitmentSd, Transform::Log);
    let surv_sd = push("logsd_N".into(), ParamKind::SurvivalSd, Transform::Log);
    let bh = (spec.recruitment == RecruitmentKind::BevertonHolt).then(|| {
        (
            push("log_bh_a".into(), ParamKind::BevertonHoltA, Transform::Log),
            push("log_bh_b".into(), ParamKind::BevertonHoltB, Transform::Log),
        )
    });
    let mut q = BTreeMap::new();
    for (f, fs) in data.fleets.iter().enumerate() {
        if fs.kind != FleetKind::Survey {
            continue;
        }
        match spec.catchability {
            CatchabilitySharing::PerAge => {
                for age in fs.ages() {
                    let i = push(format!("logq.{}.age{age}", fs.name), ParamKind::LogCatchability, Transform::Log);
                    q.insert((f, age), i);
                }
            }
            CatchabilitySharing::PerFleet => {
                let i = push(format!("logq.{}", fs.name), ParamKind::LogCatchability, Transform::Log);
                for age in fs.ages() {
                    q.insert((f, age), i);
                }
            }
        }
    }
    let sharing = build_sharing_map(&data.fleets, spec.family, spec.share_mode);
    let mut obs_offset = None;
    for (role, label) in &sharing.entries {
        let tr = obs_transform(spec.family, *role);
        let i = push(label.clone(), ParamKind::Observation(*role), tr);
        obs_offset.get_or_insert(i);
    }
    let names: Vec<String> = entries.iter().map(|e| e.0.clone()).collect();
    let obs_offset = obs_offset.unwrap_or(names.len());
    let kinds = entries.iter().map(|e| e.1).collect();
    let transforms = entries.iter().map(|e| e.2).collect();
    ParamLayout { names, kinds, transforms, f_sd, f_rho, rec_sd, surv_sd, bh, q, obs_offset, sharing }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BiologyInputs;
    use crate::densities_uv::{logpdf_uv, UvEval};
    use crate::model_space::FleetSpec;
    use crate::process::{baranov_catch, process_nll, ProcessParams};
    use crate::densities_mv::Ar1Scale;

    fn dataset(obs: Vec<(usize, i32, Vec<f64>)>) -> Dataset {
        let bio = BiologyInputs::uniform((2000, 2003), (1, 3), 0.2, &[0.2, 0.6, 1.1], &[0.0, 0.5, 1.0]);
        let fleets = vec![
            FleetSpec::new("catch", FleetKind::Commercial, (2000, 2003), (1, 3)),
            FleetSpec::new("survey", FleetKind::Survey, (2001, 2003), (2, 3)).with_timing(0.25),
        ];
        let mut tables = vec![BTreeMap::new(), BTreeMap::new()];
        for (f, y, v) in obs {
            tables[f].insert(y, v);
        }
        Dataset::new(fleets, tables, bio).unwrap()
    }

    fn states() -> LatentStates {
        LatentStates {
            log_f: (0..4).map(|y| vec![-1.5 + 0.05 * y as f64, -1.0, -0.9]).collect(),
            log_n: (0..4).map(|y| vec![8.0 + 0.1 * y as f64, 7.2, 6.9 - 0.05 * y as f64]).collect(),
        }
    }

    #[test]
    fn empty_observations_give_process_nll() {
        let model = StockModel::new(ModelSpec::new(Family::M1), dataset(vec![])).unwrap();
        let mut theta = model.initial_theta();
        theta[0] = 0.3f64.ln();
        theta[1] = 0.4;
        let s = states();
        let nat = model.layout.natural(&theta);
        let p = ProcessParams {
            f_scale: Ar1Scale::new(vec![nat[0]; 3], nat[1]),
            survival_sd: nat[3],
            recruitment: Recruitment::RandomWalk,
            rec_sd: nat[2],
        };
        let m = vec![vec![0.2; 3]; 4];
        let mat = vec![vec![0.0, 0.5, 1.0]; 4];
        let w = vec![vec![0.2, 0.6, 1.1]; 4];
        let expected = process_nll(&s, &p, &m, &mat, &w).unwrap();
        assert!((model.joint_nll(&theta, &s) - expected).abs() < 1e-10);
    }

    #[test]
    fn single_observation_adds_its_density() {
        let base = StockModel::new(ModelSpec::new(Family::M1), dataset(vec![])).unwrap();
        let one = StockModel::new(ModelSpec::new(Family::M1), dataset(vec![(0, 2002, vec![400.0, 300.0, 200.0])]))
            .unwrap();
        let theta = one.initial_theta();
        let s = states();
        let extra = one.joint_nll(&theta, &s) - base.joint_nll(&theta, &s);
        let mut expected = 0.0;
        for (k, &x) in [400.0, 300.0, 200.0].iter().enumerate() {
            let mu = baranov_catch(s.log_f[2][k].exp(), 0.2, s.log_n[2][k].exp());
            expected -= logpdf_uv(Family::M1, UvEval::new(x, mu, 0.5)).unwrap();
        }
        assert!((extra - expected).abs() < 1e-9);
    }

    #[test]
    fn weights_of_one_match_numbers_family() {
        let obs = vec![(0, 2001, vec![400.0, 300.0, 200.0]), (1, 2002, vec![3.0, 1.5])];
        let mut d = dataset(obs);
        d.biology.catch_weight = crate::data::YearAgeGrid::new((2000, 2003), (1, 3), 1.0);
        for (a, b) in [(Family::M8, Family::M11), (Family::M9, Family::M12), (Family::M10, Family::M13)] {
            let ma = StockModel::new(ModelSpec::new(a), d.clone()).unwrap();
            let mb = StockModel::new(ModelSpec::new(b), d.clone()).unwrap();
            let theta = ma.initial_theta();
            let diff = ma.joint_nll(&theta, &states()) - mb.joint_nll(&theta, &states());
            assert!(diff.abs() < 1e-10, "{a} vs {b}: {diff}");
        }
    }

    #[test]
    fn jacobian_toggle_shifts_by_log_det() {
        let obs = vec![(0, 2001, vec![400.0, 300.0, 200.0]), (0, 2003, vec![350.0, 320.0, 150.0]), (1, 2002, vec![3.0, 1.5])];
        let d = dataset(obs);
        let on = StockModel::new(ModelSpec::new(Family::M9), d.clone()).unwrap();
        let mut spec = ModelSpec::new(Family::M9);
        spec.jacobian_correction = false;
        let off = StockModel::new(spec, d).unwrap();
        let theta = on.initial_theta();
        let diff = off.joint_nll(&theta, &states()) - on.joint_nll(&theta, &states());
        assert!((diff - on.log_jacobian_total()).abs() < 1e-9);
    }

    #[test]
    fn bandwidth_and_terms() {
        let model = StockModel::new(ModelSpec::new(Family::M7), dataset(vec![(1, 2002, vec![3.0, 1.5])])).unwrap();
        assert!(model.bandwidth() <= 2 * 6 - 1);
        for l in model.terms() {
            assert!(l.windows(2).all(|w| w[0] < w[1]));
        }
        let u = model.initial_latents();
        assert_eq!(model.pack(&model.unpack(&u)), u);
    }

    #[test]
    fn parameter_counts() {
        let d = dataset(vec![]);
        let mut spec = ModelSpec::new(Family::M7);
        spec.recruitment = RecruitmentKind::BevertonHolt;
        let m = StockModel::new(spec, d).unwrap();
        // σF, ρF, σR, σN, a, b, 2 q, 3+2 scales, 2 correlations
        assert_eq!(m.layout.len(), 6 + 2 + 7);
        assert_eq!(m.layout.n_process(), 8);
    }
}
