//! Simulation of complete datasets (latent states and observations) from a
//! model specification and a true parameter vector.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bridge::{combine, SplitObs, TotalKind};
use crate::data::{BiologyInputs, Dataset};
use crate::densities_mv::{ar1_cholesky, sample_mv, Ar1Scale, MvParams};
use crate::densities_uv::sample_uv;
use crate::model::{ModelSpec, ParamKind, StockModel};
use crate::model_space::{Family, FamilyClass, FleetKind, FleetSpec, ObsRole};
use crate::process::{log_recruitment, log_survivors, ssb, LatentStates, Recruitment};
use crate::Error;

/// Redraws allowed per observation before giving up.
pub const REJECTION_CAP: usize = 1000;

/// Everything needed to simulate one dataset.
#[derive(Clone, Debug)]
pub struct SimDesign {
    pub spec: ModelSpec,
    pub fleets: Vec<FleetSpec>,
    pub biology: BiologyInputs,
    /// Parameter names in θ order, as laid out by the model.
    pub names: Vec<String>,
    /// True θ on the natural scale.
    pub truth: Vec<f64>,
    /// Log F states and log N of the first year.
    pub initial: (Vec<f64>, Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimOutput {
    pub dataset: Dataset,
    pub true_latents: LatentStates,
    /// True θ on the unconstrained scale.
    pub theta_true: Vec<f64>,
    pub seed: u64,
}

/// Default true value of an observation parameter.
fn default_obs_value(family: Family, role: ObsRole) -> f64 {
    match (family, role) {
        (Family::M2, ObsRole::Scale) => 25.0,
        (Family::M3, ObsRole::Shape) => 0.5,
        (Family::M6, ObsRole::Shape) => 5.0,
        (_, ObsRole::Scale) => 0.2,
        (_, ObsRole::Shape) => 0.5,
        (_, ObsRole::Correlation) => 0.5,
        (_, ObsRole::Concentration) => 200.0,
        (_, ObsRole::TotalScale) => 0.1,
    }
}

/// Placeholder dataset with every usable fleet-year filled, so a model can
/// be laid out before any observation exists.
fn template(fleets: &[FleetSpec], biology: &BiologyInputs) -> Result<Dataset, Error> {
    let observations = fleets
        .iter()
        .map(|f| f.observed_years().map(|y| (y, vec![1.0; f.n_ages()])).collect::<BTreeMap<_, _>>())
        .collect();
    Dataset::new(fleets.to_vec(), observations, biology.clone())
}

impl SimDesign {
    /// Builds a design with default true values for the parameters.
    pub fn new(
        spec: ModelSpec,
        fleets: Vec<FleetSpec>,
        biology: BiologyInputs,
        initial: (Vec<f64>, Vec<f64>),
    ) -> Result<Self, Error> {
        let model = StockModel::new(spec.clone(), template(&fleets, &biology)?)?;
        let family = spec.family;
        let truth = model
            .layout
            .kinds
            .iter()
            .map(|k| match k {
                ParamKind::FSd => 0.15,
                ParamKind::FCorrelation => 0.5,
                ParamKind::RecruitmentSd => 0.3,
                ParamKind::SurvivalSd => 0.1,
                ParamKind::BevertonHoltA => 1.5,
                ParamKind::BevertonHoltB => 1e-5,
                ParamKind::LogCatchability => 1e-3,
                ParamKind::Observation(role) => default_obs_value(family, *role),
            })
            .collect();
        Ok(SimDesign { spec, fleets, biology, names: model.layout.names.clone(), truth, initial })
    }

    /// Desk-scale design: 5 ages, a commercial fleet and a survey at 0.125
    /// of the year, 40 years, 4 F states.
    pub fn standard(family: Family) -> Self {
        let years = (1980, 2019);
        let ages = (1, 5);
        let biology =
            BiologyInputs::uniform(years, ages, 0.2, &[0.1, 0.3, 0.6, 0.9, 1.2], &[0.0, 0.2, 0.6, 0.9, 1.0]);
        let fleets = vec![
            FleetSpec::new("commercial", FleetKind::Commercial, years, ages),
            FleetSpec::new("survey", FleetKind::Survey, years, ages).with_timing(0.125),
        ];
        let mut spec = ModelSpec::new(family);
        spec.f_states = Some(4);
        spec.fbar_ages = Some((2, 4));
        // equilibrium numbers at F = 0.3 with 10^5 recruits
        let z = 0.5f64;
        let mut log_n: Vec<f64> = (0..5).map(|a| 1e5f64.ln() - z * a as f64).collect();
        log_n[4] -= (-(-z).exp_m1()).ln();
        let initial = (vec![0.3f64.ln(); 4], log_n);
        SimDesign::new(spec, fleets, biology, initial).expect("standard design is valid")
    }

    /// Sets the true value of a named parameter.
    pub fn set(&mut self, name: &str, value: f64) -> Result<(), Error> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("no parameter named '{name}'")))?;
        self.truth[i] = value;
        Ok(())
    }

    /// Sets every observation parameter with role `role`.
    pub fn set_role(&mut self, role: ObsRole, value: f64) {
        let model = self.model().expect("design is valid");
        for (i, k) in model.layout.kinds.iter().enumerate() {
            if *k == ParamKind::Observation(role) {
                self.truth[i] = value;
            }
        }
    }

    fn model(&self) -> Result<StockModel, Error> {
        StockModel::new(self.spec.clone(), template(&self.fleets, &self.biology)?)
    }
}

/// Simulates latent states and observations. The same seed always
/// reproduces the same output.
pub fn simulate(design: &SimDesign, seed: u64) -> Result<SimOutput, Error> {
    let model = design.model()?;
    let theta = model.layout.unconstrained(&design.truth)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states = simulate_states(&model, &theta, &design.initial, &mut rng)?;
    let family = design.spec.family;
    let (y0, _) = model.data.years();
    let mut observations = vec![BTreeMap::new(); design.fleets.len()];
    for (f, fs) in design.fleets.iter().enumerate() {
        for year in fs.observed_years() {
            let y = (year - y0) as usize;
            let lp = model.log_predictions(&theta, &states, f, y);
            let x = with_rejection(|| draw_observation(&model, &theta, f, year, &lp, &mut rng), |x| {
                acceptable(family, x)
            })
            .map_err(|e| match e {
                Error::Simulation(m) => Error::Simulation(format!("{family}: fleet '{}', year {year}: {m}", fs.name)),
                other => other,
            })?;
            observations[f].insert(year, x);
        }
    }
    let dataset = Dataset::new(design.fleets.clone(), observations, design.biology.clone())?;
    Ok(SimOutput { dataset, true_latents: states, theta_true: theta, seed })
}

/// Redraws until `accept` holds, at most [`REJECTION_CAP`] times.
fn with_rejection(
    mut draw: impl FnMut() -> Result<Vec<f64>, Error>,
    accept: impl Fn(&[f64]) -> bool,
) -> Result<Vec<f64>, Error> {
    for _ in 0..REJECTION_CAP {
        let x = draw()?;
        if accept(&x) {
            return Ok(x);
        }
    }
    Err(Error::Simulation(format!("no valid draw after {REJECTION_CAP} attempts")))
}

fn acceptable(family: Family, x: &[f64]) -> bool {
    let zero_ok = family.allows_zero() == crate::model_space::ZeroPolicy::Yes;
    x.iter().all(|&v| v.is_finite() && (v > 0.0 || (zero_ok && v == 0.0)))
}

fn simulate_states(
    model: &StockModel,
    theta: &[f64],
    initial: &(Vec<f64>, Vec<f64>),
    rng: &mut ChaCha8Rng,
) -> Result<LatentStates, Error> {
    let (ny, na, ns) = (model.n_years(), model.n_ages(), model.n_states());
    if initial.0.len() != ns || initial.1.len() != na {
        return Err(Error::Dimension(format!("initial states need {ns} log F and {na} log N values")));
    }
    let p = model.process_params(theta);
    let chol = ar1_cholesky(&p.f_scale);
    let smap = model.state_of_age().to_vec();
    let mut log_f = vec![initial.0.clone()];
    let mut log_n = vec![initial.1.clone()];
    for y in 1..ny {
        let z: Vec<f64> = (0..ns).map(|_| rng.sample(StandardNormal)).collect();
        let e = &chol * nalgebra::DVector::from_vec(z);
        let f: Vec<f64> = log_f[y - 1].iter().zip(e.iter()).map(|(a, b)| a + b).collect();
        let prev_n = &log_n[y - 1];
        let prev_f: Vec<f64> = smap.iter().map(|&s| log_f[y - 1][s]).collect();
        let (m, mat, w) = model.biology_row(y - 1);
        let mean_rec = match p.recruitment {
            Recruitment::RandomWalk => prev_n[0],
            Recruitment::BevertonHolt { .. } => {
                let n: Vec<f64> = prev_n.iter().map(|v| v.exp()).collect();
                log_recruitment(&p.recruitment, prev_n[0], ssb(&n, mat, w))
            }
        };
        let mut n = vec![mean_rec + p.rec_sd * rng.sample::<f64, _>(StandardNormal)];
        for s in log_survivors(prev_n, &prev_f, m) {
            n.push(s + p.survival_sd * rng.sample::<f64, _>(StandardNormal));
        }
        log_f.push(f);
        log_n.push(n);
    }
    Ok(LatentStates { log_f, log_n })
}

fn draw_observation(
    model: &StockModel,
    theta: &[f64],
    f: usize,
    year: i32,
    lp: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, Error> {
    let family = model.spec.family;
    let fs = &model.data.fleets[f];
    let ages: Vec<i32> = fs.ages().collect();
    let scale = |n: usize| {
        let sds = ages[..n].iter().map(|&a| model.obs_value(theta, f, Some(a), ObsRole::Scale)).collect();
        Ar1Scale::new(sds, model.obs_value(theta, f, None, ObsRole::Correlation))
    };
    match family.class() {
        FamilyClass::UnivariateNumbers => Ok(ages
            .iter()
            .zip(lp)
            .map(|(&age, &l)| {
                let sigma = model.obs_value(theta, f, Some(age), ObsRole::Scale);
                let tau = match family {
                    Family::M3 | Family::M6 => model.obs_value(theta, f, Some(age), ObsRole::Shape),
                    _ => 0.0,
                };
                sample_uv(family, l.exp(), sigma, tau, rng)
            })
            .collect()),
        FamilyClass::MultivariateNumbers => {
            let mu: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
            sample_mv(family, &mu, &MvParams::Scale(scale(ages.len())), rng)
        }
        _ => {
            let mu: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
            let weights: Option<Vec<f64>> = (TotalKind::for_family(family) == Some(TotalKind::Weight)).then(|| {
                let g = model.data.biology.catch_weight_for(&fs.name);
                ages.iter().map(|&a| g.at(year, a)).collect()
            });
            let params = match family {
                Family::M10 | Family::M13 => {
                    MvParams::Concentration(model.obs_value(theta, f, None, ObsRole::Concentration))
                }
                _ => MvParams::Scale(scale(ages.len() - 1)),
            };
            let s: f64 = mu.iter().sum();
            let pi: Vec<f64> = mu.iter().map(|v| v / s).collect();
            let proportions = sample_mv(family, &pi, &params, rng)?;
            let pred_total: f64 = match &weights {
                Some(w) => mu.iter().zip(w).map(|(a, b)| a * b).sum(),
                None => s,
            };
            let total_sd = model.obs_value(theta, f, None, ObsRole::TotalScale);
            let z: f64 = StandardNormal.sample(rng);
            let split = SplitObs {
                proportions,
                total: pred_total * (total_sd * z).exp(),
                total_kind: TotalKind::for_family(family).expect("proportions family"),
                weights,
            };
            Ok(combine(&split))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    
    #[test]
    fn same_seed_same_output() {
        for family in Family::ALL {
            let d = SimDesign::standard(family);
            let a = simulate(&d, 7).unwrap();
            let b = simulate(&d, 7).unwrap();
            assert_eq!(a, b, "{family}");
            assert_ne!(a.dataset, simulate(&d, 8).unwrap().dataset);
        }
    }

    #[test]
    fn vanishing_noise_reproduces_predictions() {
        for family in [Family::M1, Family::M2, Family::M4, Family::M7, Family::M8, Family::M10, Family::M12] {
            let mut d = SimDesign::standard(family);
            let tiny = if family == Family::M2 { 1e24 } else { 1e-12 };
            d.set_role(ObsRole::Scale, tiny);
            d.set_role(ObsRole::TotalScale, 1e-12);
            d.set_role(ObsRole::Concentration, 1e24);
            let out = simulate(&d, 3).unwrap();
            let model = StockModel::new(d.spec.clone(), out.dataset.clone()).unwrap();
            for f in 0..2 {
                for (y, (&year, x)) in out.dataset.observations[f].iter().enumerate() {
                    assert_eq!(year, 1980 + y as i32);
                    let lp = model.log_predictions(&out.theta_true, &out.true_latents, f, y);
                    for (v, l) in x.iter().zip(lp) {
                        assert!((v.ln() - l).abs() < 1e-8, "{family}: {v} vs {}", l.exp());
                    }
                }
            }
        }
    }

    #[test]
    fn mv_lognormal_residual_autocorrelation() {
        let mut d = SimDesign::standard(Family::M7);
        let years = (1800, 1999);
        d.biology = BiologyInputs::uniform(years, (1, 5), 0.2, &[0.1, 0.3, 0.6, 0.9, 1.2], &[0.0, 0.2, 0.6, 0.9, 1.0]);
        for fs in &mut d.fleets {
            fs.first_year = years.0;
            fs.last_year = years.1;
        }
        d.set_role(ObsRole::Correlation, 0.8);
        let out = simulate(&d, 11).unwrap();
        let model = StockModel::new(d.spec.clone(), out.dataset.clone()).unwrap();
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for (y, x) in out.dataset.observations[0].values().enumerate() {
            let lp = model.log_predictions(&out.theta_true, &out.true_latents, 0, y);
            let r: Vec<f64> = x.iter().zip(&lp).map(|(v, l)| v.ln() - l).collect();
            for k in 0..r.len() - 1 {
                sxy += r[k] * r[k + 1];
                sxx += r[k] * r[k];
            }
        }
        let rho = sxy / sxx;
        assert!(rho > 0.6 && rho < 0.95, "{rho}");
    }

    #[test]
    fn negative_normal_draws_are_rejected() {
        let mut d = SimDesign::standard(Family::M4);
        d.set_role(ObsRole::Scale, 0.6);
        let out = simulate(&d, 5).unwrap();
        assert!(out.dataset.observations.iter().flat_map(|o| o.values().flatten()).all(|&v| v > 0.0));
        let mut calls = 0;
        let r = with_rejection(
            || {
                calls += 1;
                Ok(vec![-1.0])
            },
            |x| acceptable(Family::M4, x),
        );
        assert!(matches!(r, Err(Error::Simulation(_))));
        assert_eq!(calls, REJECTION_CAP);
        assert!(!acceptable(Family::M1, &[1.0, 0.0]));
        assert!(acceptable(Family::M5, &[1.0, 0.0]));
    }
}
