//! Run configuration: a flat `key = value` text file.
//!
//! ```text
//! # families to fit, or "all"
//! families = M1, M2, M7
//! recruitment = random-walk        # or beverton-holt
//! fbar_ages = 2-4
//! f_states = 4
//! f_sd_shared = true
//! catchability = per-age           # or per-fleet
//! jacobian = true
//! timing.survey = 0.125            # overrides fleets.csv
//! grad_tol = 1e-6
//! inner_tol = 1e-8
//! max_restarts = 10
//! seed = 1
//! out = report
//!
//! # used by `simulate`
//! sim.family = M7
//! sim.truth.commercial.cor = 0.8
//! ```
//!
//! Blank lines and text after `#` are ignored. Unknown keys are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use stockobs::{
    CatchabilitySharing, Dataset, Family, FitOptions, ModelSpec, RecruitmentKind, ShareMode, SimDesign,
};

use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub families: Vec<Family>,
    pub recruitment: RecruitmentKind,
    pub fbar_ages: Option<(i32, i32)>,
    pub f_states: Option<usize>,
    pub f_sd_shared: bool,
    pub catchability: CatchabilitySharing,
    pub jacobian: bool,
    /// Survey timing overrides by fleet name.
    pub timings: BTreeMap<String, f64>,
    pub grad_tol: f64,
    pub inner_tol: f64,
    pub max_restarts: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub sim_family: Family,
    /// True values by parameter name, natural scale.
    pub sim_truth: BTreeMap<String, f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fit = FitOptions::default();
        RunConfig {
            families: Family::ALL.to_vec(),
            recruitment: RecruitmentKind::RandomWalk,
            fbar_ages: None,
            f_states: None,
            f_sd_shared: true,
            catchability: CatchabilitySharing::PerAge,
            jacobian: true,
            timings: BTreeMap::new(),
            grad_tol: fit.outer.grad_tol,
            inner_tol: fit.inner.tol,
            max_restarts: fit.max_restarts,
            seed: fit.seed,
            out: None,
            sim_family: Family::M1,
            sim_truth: BTreeMap::new(),
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Some(true),
        "false" | "no" | "0" => Some(false),
        _ => None,
    }
}

fn parse_range(v: &str) -> Option<(i32, i32)> {
    let (a, b) = v.split_once('-')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut c = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| CliError::Config(format!("line {}: {what}", i + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key = value"))?;
            let (key, value) = (key.trim(), value.trim());
            let invalid = || bad(&format!("invalid value '{value}' for {key}"));
            match key {
                "families" => {
                    c.families = if value.eq_ignore_ascii_case("all") {
                        Family::ALL.to_vec()
                    } else {
                        value
                            .split(',')
                            .map(|f| f.trim().parse::<Family>().map_err(|_| invalid()))
                            .collect::<Result<_, _>>()?
                    };
                }
                "recruitment" => {
                    c.recruitment = match value {
                        "random-walk" => RecruitmentKind::RandomWalk,
                        "beverton-holt" => RecruitmentKind::BevertonHolt,
                        _ => return Err(invalid()),
                    }
                }
                "fbar_ages" => c.fbar_ages = Some(parse_range(value).ok_or_else(invalid)?),
                "f_states" => c.f_states = Some(value.parse().map_err(|_| invalid())?),
                "f_sd_shared" => c.f_sd_shared = parse_bool(value).ok_or_else(invalid)?,
                "catchability" => {
                    c.catchability = match value {
                        "per-age" => CatchabilitySharing::PerAge,
                        "per-fleet" => CatchabilitySharing::PerFleet,
                        _ => return Err(invalid()),
                    }
                }
                "jacobian" => c.jacobian = parse_bool(value).ok_or_else(invalid)?,
                "grad_tol" => c.grad_tol = value.parse().map_err(|_| invalid())?,
                "inner_tol" => c.inner_tol = value.parse().map_err(|_| invalid())?,
                "max_restarts" => c.max_restarts = value.parse().map_err(|_| invalid())?,
                "seed" => c.seed = value.parse().map_err(|_| invalid())?,
                "out" => c.out = Some(PathBuf::from(value)),
                "sim.family" => c.sim_family = value.parse().map_err(|_| invalid())?,
                _ => {
                    if let Some(fleet) = key.strip_prefix("timing.") {
                        let t: f64 = value.parse().map_err(|_| invalid())?;
                        if !(0.0..=1.0).contains(&t) {
                            return Err(invalid());
                        }
                        c.timings.insert(fleet.to_string(), t);
                    } else if let Some(name) = key.strip_prefix("sim.truth.") {
                        c.sim_truth.insert(name.to_string(), value.parse().map_err(|_| invalid())?);
                    } else {
                        return Err(bad(&format!("unknown key '{key}'")));
                    }
                }
            }
        }
        c.check()?;
        Ok(c)
    }

    fn check(&self) -> Result<(), CliError> {
        if self.families.is_empty() {
            return Err(CliError::Config("no families requested".into()));
        }
        if let Some((a, b)) = self.fbar_ages {
            if a > b {
                return Err(CliError::Config(format!("fbar_ages {a}-{b} is empty")));
            }
        }
        if self.f_states == Some(0) {
            return Err(CliError::Config("f_states must be at least 1".into()));
        }
        if !(self.grad_tol > 0.0 && self.inner_tol > 0.0) {
            return Err(CliError::Config("tolerances must be positive".into()));
        }
        Ok(())
    }

    /// Checks the parts of the configuration that depend on the data and
    /// applies the timing overrides.
    pub fn apply_to(&self, dataset: &mut Dataset) -> Result<(), CliError> {
        let ages = dataset.ages();
        if let Some((a, b)) = self.fbar_ages {
            if a < ages.0 || b > ages.1 {
                return Err(CliError::Config(format!("fbar_ages {a}-{b} outside ages {}-{}", ages.0, ages.1)));
            }
        }
        for (name, &t) in &self.timings {
            let fleet = dataset
                .fleets
                .iter_mut()
                .find(|f| &f.name == name)
                .ok_or_else(|| CliError::Config(format!("timing for unknown fleet '{name}'")))?;
            fleet.timing = t;
        }
        Ok(())
    }

    /// Model specification for `family`, always with full sharing.
    pub fn spec(&self, family: Family) -> ModelSpec {
        let mut spec = ModelSpec::new(family);
        spec.share_mode = ShareMode::Full;
        spec.recruitment = self.recruitment;
        spec.fbar_ages = self.fbar_ages;
        spec.f_states = self.f_states;
        spec.f_sd_shared = self.f_sd_shared;
        spec.catchability = self.catchability;
        spec.jacobian_correction = self.jacobian;
        spec
    }

    pub fn fit_options(&self) -> FitOptions {
        let mut o = FitOptions::default();
        o.outer.grad_tol = self.grad_tol;
        o.inner.tol = self.inner_tol;
        o.max_restarts = self.max_restarts;
        o.seed = self.seed;
        o
    }

    /// Simulation design: the desk-scale design with this configuration's
    /// model settings and true-value overrides.
    pub fn sim_design(&self) -> Result<SimDesign, CliError> {
        let base = SimDesign::standard(self.sim_family);
        let mut spec = self.spec(self.sim_family);
        spec.f_states = self.f_states.or(base.spec.f_states);
        spec.fbar_ages = self.fbar_ages.or(base.spec.fbar_ages);
        let mut fleets = base.fleets.clone();
        for (name, &t) in &self.timings {
            let f = fleets
                .iter_mut()
                .find(|f| &f.name == name)
                .ok_or_else(|| CliError::Config(format!("timing for unknown fleet '{name}'")))?;
            f.timing = t;
        }
        let n_states = spec.f_states.unwrap_or(base.initial.1.len());
        let initial = (vec![base.initial.0[0]; n_states], base.initial.1.clone());
        let mut design = SimDesign::new(spec, fleets, base.biology.clone(), initial)?;
        for (name, &v) in &self.sim_truth {
            design.set(name, v)?;
        }
        Ok(design)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_keys() {
        let c = RunConfig::parse(
            "families = M1, m7 # two\nrecruitment = beverton-holt\nfbar_ages = 2-4\nf_states=3\n\
             f_sd_shared = no\ncatchability = per-fleet\njacobian = false\ntiming.survey = 0.5\n\
             grad_tol = 1e-5\ninner_tol=1e-9\nmax_restarts = 2\nseed = 7\nout = r\n\
             sim.family = M8\nsim.truth.logsd_F = 0.2\n",
        )
        .unwrap();
        assert_eq!(c.families, vec![Family::M1, Family::M7]);
        assert_eq!(c.recruitment, RecruitmentKind::BevertonHolt);
        assert_eq!(c.fbar_ages, Some((2, 4)));
        assert_eq!(c.f_states, Some(3));
        assert!(!c.f_sd_shared && !c.jacobian);
        assert_eq!(c.timings["survey"], 0.5);
        assert_eq!((c.grad_tol, c.inner_tol, c.max_restarts, c.seed), (1e-5, 1e-9, 2, 7));
        assert_eq!(c.sim_family, Family::M8);
        assert_eq!(c.sim_truth["logsd_F"], 0.2);
    }

    #[test]
    fn defaults_fit_everything() {
        let c = RunConfig::parse("# nothing\n\n").unwrap();
        assert_eq!(c.families.len(), 13);
        assert_eq!(c.fit_options(), FitOptions::default());
    }

    #[test]
    fn rejects_bad_input() {
        for text in ["families =", "nonsense = 1", "fbar_ages = 4-2", "f_states = 0", "grad_tol = x", "no equals"] {
            assert!(matches!(RunConfig::parse(text), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn sim_design_applies_truths() {
        let c = RunConfig::parse("sim.family = M7\nsim.truth.commercial.cor = 0.8\n").unwrap();
        let d = c.sim_design().unwrap();
        let i = d.names.iter().position(|n| n == "commercial.cor").unwrap();
        assert_eq!(d.truth[i], 0.8);
        assert!(RunConfig::parse("sim.truth.nope = 1").unwrap().sim_design().is_err());
    }
}
