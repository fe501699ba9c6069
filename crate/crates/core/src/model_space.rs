//! The thirteen observational likelihood families, fleet descriptions and the
//! mapping from (fleet, age, role) to estimated observational parameters.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::Error;

/// Observational likelihood family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
    M7,
    M8,
    M9,
    M10,
    M11,
    M12,
    M13,
}

/// Model class grouping the families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FamilyClass {
    /// Univariate numbers-at-age.
    UnivariateNumbers,
    /// Multivariate numbers-at-age.
    MultivariateNumbers,
    /// Proportions-at-age with a log-normal total in numbers.
    ProportionsWithNumbers,
    /// Proportions-at-age with a log-normal total in weight.
    ProportionsWithWeight,
}

impl fmt::Display for FamilyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FamilyClass::UnivariateNumbers => "UN@A",
            FamilyClass::MultivariateNumbers => "MN@A",
            FamilyClass::ProportionsWithNumbers => "P@AwN",
            FamilyClass::ProportionsWithWeight => "P@AwW",
        })
    }
}

/// Whether zero observations are admissible.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ZeroPolicy {
    No,
    Some,
    Yes,
}

/// What the predicted catch pins down in the observation distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaranovLink {
    Median,
    Mean,
    Location,
}

/// Composition density used by the proportions classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompositionKind {
    AdditiveLogisticNormal,
    MultiplicativeLogisticNormal,
    Dirichlet,
}

impl Family {
    pub const ALL: [Family; 13] = [
        Family::M1,
        Family::M2,
        Family::M3,
        Family::M4,
        Family::M5,
        Family::M6,
        Family::M7,
        Family::M8,
        Family::M9,
        Family::M10,
        Family::M11,
        Family::M12,
        Family::M13,
    ];

    pub fn index(self) -> usize {
        self as usize + 1
    }

    pub fn class(self) -> FamilyClass {
        use Family::*;
        match self {
            M1 | M2 | M3 | M4 | M5 | M6 => FamilyClass::UnivariateNumbers,
            M7 => FamilyClass::MultivariateNumbers,
            M8 | M9 | M10 => FamilyClass::ProportionsWithNumbers,
            M11 | M12 | M13 => FamilyClass::ProportionsWithWeight,
        }
    }

    pub fn distribution(self) -> &'static str {
        use Family::*;
        match self {
            M1 => "log-normal",
            M2 => "gamma",
            M3 => "generalized gamma",
            M4 => "normal",
            M5 => "left-truncated normal",
            M6 => "log Student's t",
            M7 => "multivariate log-normal",
            M8 | M11 => "additive logistic normal",
            M9 | M12 => "multiplicative logistic normal",
            M10 | M13 => "Dirichlet",
        }
    }

    pub fn allows_zero(self) -> ZeroPolicy {
        use Family::*;
        match self {
            M2 | M3 => ZeroPolicy::Some,
            M4 | M5 => ZeroPolicy::Yes,
            _ => ZeroPolicy::No,
        }
    }

    pub fn has_correlation(self) -> bool {
        matches!(self, Family::M7 | Family::M8 | Family::M9 | Family::M11 | Family::M12)
    }

    pub fn baranov_link(self) -> BaranovLink {
        use Family::*;
        match self {
            M1 | M7 => BaranovLink::Median,
            M2 | M4 | M10 | M13 => BaranovLink::Mean,
            _ => BaranovLink::Location,
        }
    }

    pub fn composition(self) -> Option<CompositionKind> {
        use Family::*;
        match self {
            M8 | M11 => Some(CompositionKind::AdditiveLogisticNormal),
            M9 | M12 => Some(CompositionKind::MultiplicativeLogisticNormal),
            M10 | M13 => Some(CompositionKind::Dirichlet),
            _ => None,
        }
    }

    pub fn is_proportions(self) -> bool {
        self.composition().is_some()
    }

    /// Observational parameter roles of one fleet, in index order.
    fn roles(self) -> &'static [ObsRole] {
        use Family::*;
        use ObsRole::*;
        match self {
            M1 | M2 | M4 | M5 => &[Scale],
            M3 | M6 => &[Scale, Shape],
            M7 => &[Scale, Correlation],
            M8 | M9 | M11 | M12 => &[Scale, Correlation, TotalScale],
            M10 | M13 => &[Concentration, TotalScale],
        }
    }

    /// Number of ages carrying a per-age role for a fleet with `n_ages` ages.
    fn per_age_count(self, n_ages: usize) -> usize {
        match self.composition() {
            Some(CompositionKind::Dirichlet) => 0,
            // scales live on the A−1 logratio coordinates
            Some(_) => n_ages.saturating_sub(1),
            None => n_ages,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "M{}", self.index())
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        let t = s.trim();
        let n: usize = t
            .strip_prefix('M')
            .or_else(|| t.strip_prefix('m'))
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| Error::Config(format!("unknown family '{s}'")))?;
        Family::ALL
            .get(n.wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown family '{s}'")))
    }
}

/// Returns the class of a family.
pub fn family_class(family: Family) -> FamilyClass {
    family.class()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FleetKind {
    Commercial,
    Survey,
}

impl fmt::Display for FleetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FleetKind::Commercial => "commercial",
            FleetKind::Survey => "survey",
        })
    }
}

impl FromStr for FleetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s.trim().to_ascii_lowercase().as_str() {
            "commercial" | "catch" => Ok(FleetKind::Commercial),
            "survey" => Ok(FleetKind::Survey),
            other => Err(Error::Config(format!("unknown fleet kind '{other}'"))),
        }
    }
}

/// One data source: commercial catches or a survey index series.
#[derive(Clone, Debug, PartialEq)]
pub struct FleetSpec {
    pub name: String,
    pub kind: FleetKind,
    pub first_year: i32,
    pub last_year: i32,
    pub first_age: i32,
    pub last_age: i32,
    pub missing_years: BTreeSet<i32>,
    /// Fraction of the year elapsed when the survey takes place.
    pub timing: f64,
}

impl FleetSpec {
    pub fn new(name: &str, kind: FleetKind, years: (i32, i32), ages: (i32, i32)) -> Self {
        FleetSpec {
            name: name.to_string(),
            kind,
            first_year: years.0,
            last_year: years.1,
            first_age: ages.0,
            last_age: ages.1,
            missing_years: BTreeSet::new(),
            timing: 0.0,
        }
    }

    pub fn with_timing(mut self, timing: f64) -> Self {
        self.timing = timing;
        self
    }

    pub fn with_missing(mut self, years: impl IntoIterator<Item = i32>) -> Self {
        self.missing_years.extend(years);
        self
    }

    pub fn n_ages(&self) -> usize {
        (self.last_age - self.first_age + 1).max(0) as usize
    }

    pub fn ages(&self) -> impl Iterator<Item = i32> {
        self.first_age..=self.last_age
    }

    pub fn contains_year(&self, year: i32) -> bool {
        (self.first_year..=self.last_year).contains(&year)
    }

    /// Years inside the span that carry observations.
    pub fn observed_years(&self) -> impl Iterator<Item = i32> + '_ {
        (self.first_year..=self.last_year).filter(move |y| !self.missing_years.contains(y))
    }

    /// Survey timing at the midpoint of a quarter (1-4).
    pub fn quarter_midpoint(quarter: u8) -> f64 {
        (f64::from(quarter) - 0.5) / 4.0
    }

    pub fn validate(&self, ages: (i32, i32)) -> Result<(), Error> {
        if self.first_year > self.last_year || self.first_age > self.last_age {
            return Err(Error::Config(format!("fleet '{}' has an empty span", self.name)));
        }
        if self.first_age < ages.0 || self.last_age > ages.1 {
            return Err(Error::Config(format!(
                "fleet '{}' ages {}-{} outside model ages {}-{}",
                self.name, self.first_age, self.last_age, ages.0, ages.1
            )));
        }
        if let Some(y) = self.missing_years.iter().find(|y| !self.contains_year(**y)) {
            return Err(Error::Config(format!(
                "fleet '{}' missing year {y} outside its span",
                self.name
            )));
        }
        if !(0.0..1.0).contains(&self.timing) {
            return Err(Error::Config(format!("fleet '{}' timing must lie in [0,1)", self.name)));
        }
        Ok(())
    }
}

/// Parameter-sharing extreme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ShareMode {
    /// Independent parameters per age and fleet.
    #[default]
    Full,
    /// Ages within a fleet share one parameter per role.
    Minimal,
}

impl FromStr for ShareMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s.trim() {
            "full" => Ok(ShareMode::Full),
            "minimal" => Ok(ShareMode::Minimal),
            other => Err(Error::Config(format!("unknown sharing mode '{other}'"))),
        }
    }
}

/// What an observational parameter does in the density.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ObsRole {
    /// σ: log-scale sd, gamma shape, CV or logratio scale.
    Scale,
    /// τ: generalized-gamma shape or log-t degrees of freedom.
    Shape,
    /// ρ: AR(1) correlation between ages.
    Correlation,
    /// Dirichlet concentration.
    Concentration,
    /// Log-scale sd of the total.
    TotalScale,
}

impl ObsRole {
    pub fn per_age(self) -> bool {
        matches!(self, ObsRole::Scale | ObsRole::Shape)
    }

    fn label(self) -> &'static str {
        match self {
            ObsRole::Scale => "scale",
            ObsRole::Shape => "shape",
            ObsRole::Correlation => "cor",
            ObsRole::Concentration => "conc",
            ObsRole::TotalScale => "total_scale",
        }
    }
}

/// Lookup key of one observational parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObsKey {
    pub fleet: usize,
    /// `None` for per-fleet roles.
    pub age: Option<i32>,
    pub role: ObsRole,
}

/// Map from (fleet, age, role) to observational parameter index.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSharing {
    pub mode: ShareMode,
    pub key_map: BTreeMap<ObsKey, usize>,
    /// Role and label of each index.
    pub entries: Vec<(ObsRole, String)>,
}

impl ParamSharing {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index(&self, fleet: usize, age: Option<i32>, role: ObsRole) -> Option<usize> {
        self.key_map.get(&ObsKey { fleet, age, role }).copied()
    }
}

/// Builds the sharing map for `family` over `fleets`.
pub fn build_sharing_map(fleets: &[FleetSpec], family: Family, mode: ShareMode) -> ParamSharing {
    let mut key_map = BTreeMap::new();
    let mut entries = Vec::new();
    for (f, fleet) in fleets.iter().enumerate() {
        let per_age = family.per_age_count(fleet.n_ages());
        for &role in family.roles() {
            if role.per_age() {
                if per_age == 0 {
                    continue;
                }
                let ages = fleet.ages().take(per_age);
                match mode {
                    ShareMode::Full => {
                        for age in ages {
                            key_map.insert(ObsKey { fleet: f, age: Some(age), role }, entries.len());
                            entries.push((role, format!("{}.{}.age{}", fleet.name, role.label(), age)));
                        }
                    }
                    ShareMode::Minimal => {
                        let idx = entries.len();
                        for age in ages {
                            key_map.insert(ObsKey { fleet: f, age: Some(age), role }, idx);
                        }
                        entries.push((role, format!("{}.{}", fleet.name, role.label())));
                    }
                }
            } else {
                key_map.insert(ObsKey { fleet: f, age: None, role }, entries.len());
                entries.push((role, format!("{}.{}", fleet.name, role.label())));
            }
        }
    }
    ParamSharing { mode, key_map, entries }
}

/// Number of estimated observational parameters.
pub fn count_obs_params(family: Family, fleets: &[FleetSpec], mode: ShareMode) -> usize {
    fleets
        .iter()
        .map(|fleet| {
            let per_age = family.per_age_count(fleet.n_ages());
            family
                .roles()
                .iter()
                .map(|role| match (role.per_age(), mode) {
                    (false, _) => 1,
                    (true, ShareMode::Full) => per_age,
                    (true, ShareMode::Minimal) => usize::from(per_age > 0),
                })
                .sum::<usize>()
        })
        .sum()
}

/// Map between a constrained parameter and the real line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    Identity,
    /// Positive parameters.
    Log,
    /// Correlations in (−1, 1) via `2/(1+e^{−x}) − 1`.
    Squash,
}

impl Transform {
    pub fn to_unconstrained(self, v: f64) -> Result<f64, Error> {
        match self {
            Transform::Identity if v.is_finite() => Ok(v),
            Transform::Log if v > 0.0 && v.is_finite() => Ok(v.ln()),
            Transform::Squash if v > -1.0 && v < 1.0 => Ok(((1.0 + v) / (1.0 - v)).ln()),
            _ => Err(Error::InvalidParameter(format!("{v} outside the domain of {self:?}"))),
        }
    }

    pub fn from_unconstrained(self, x: f64) -> f64 {
        match self {
            Transform::Identity => x,
            Transform::Log => x.exp(),
            Transform::Squash => (0.5 * x).tanh(),
        }
    }

    pub fn apply<R: crate::Real>(self, x: R) -> R {
        match self {
            Transform::Identity => x,
            Transform::Log => x.exp(),
            Transform::Squash => (x * 0.5).tanh(),
        }
    }
}

/// Transform used for an observational role under `family`.
pub fn obs_transform(family: Family, role: ObsRole) -> Transform {
    match role {
        ObsRole::Correlation => Transform::Squash,
        ObsRole::Shape if family == Family::M3 => Transform::Identity,
        _ => Transform::Log,
    }
}

/// Observational parameters on their natural scale, indexed like the sharing map.
#[derive(Clone, Debug, PartialEq)]
pub struct ObsParams {
    pub family: Family,
    pub values: Vec<f64>,
}

impl ObsParams {
    pub fn get(&self, sharing: &ParamSharing, fleet: usize, age: Option<i32>, role: ObsRole) -> Option<f64> {
        sharing.index(fleet, age, role).map(|i| self.values[i])
    }

    pub fn to_unconstrained(&self, sharing: &ParamSharing) -> Result<Vec<f64>, Error> {
        self.values
            .iter()
            .zip(&sharing.entries)
            .map(|(&v, (role, _))| obs_transform(self.family, *role).to_unconstrained(v))
            .collect()
    }

    pub fn from_unconstrained(family: Family, sharing: &ParamSharing, x: &[f64]) -> Self {
        ObsParams {
            family,
            values: x
                .iter()
                .zip(&sharing.entries)
                .map(|(&v, (role, _))| obs_transform(family, *role).from_unconstrained(v))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fleets(spans: &[(i32, i32)]) -> Vec<FleetSpec> {
        spans
            .iter()
            .enumerate()
            .map(|(i, &ages)| {
                let kind = if i == 0 { FleetKind::Commercial } else { FleetKind::Survey };
                FleetSpec::new(&format!("f{i}"), kind, (2000, 2010), ages)
            })
            .collect()
    }

    #[test]
    fn classes_and_flags() {
        assert_eq!(family_class(Family::M7), FamilyClass::MultivariateNumbers);
        assert_eq!(family_class(Family::M1), FamilyClass::UnivariateNumbers);
        assert_eq!(family_class(Family::M13), FamilyClass::ProportionsWithWeight);
        for f in Family::ALL {
            let expected = match f.index() {
                1..=6 => FamilyClass::UnivariateNumbers,
                7 => FamilyClass::MultivariateNumbers,
                8..=10 => FamilyClass::ProportionsWithNumbers,
                _ => FamilyClass::ProportionsWithWeight,
            };
            assert_eq!(f.class(), expected);
            assert_eq!(f.has_correlation(), [7, 8, 9, 11, 12].contains(&f.index()));
            assert_eq!(f.to_string().parse::<Family>().unwrap(), f);
        }
        assert!("M14".parse::<Family>().is_err());
        assert!("M0".parse::<Family>().is_err());
    }

    #[test]
    fn table_counts() {
        let blue_whiting = fleets(&[(1, 10), (3, 8)]);
        assert_eq!(count_obs_params(Family::M1, &blue_whiting, ShareMode::Full), 16);
        assert_eq!(count_obs_params(Family::M1, &blue_whiting, ShareMode::Minimal), 2);
        let cod = fleets(&[(1, 7), (1, 5)]);
        assert_eq!(count_obs_params(Family::M7, &cod, ShareMode::Full), 14);
        assert_eq!(count_obs_params(Family::M1, &fleets(&[(1, 4)]), ShareMode::Minimal), 1);
        assert_eq!(count_obs_params(Family::M3, &cod, ShareMode::Full), 24);
        // (A−1) scales + correlation + total scale per fleet
        assert_eq!(count_obs_params(Family::M8, &cod, ShareMode::Full), 6 + 4 + 4);
        assert_eq!(count_obs_params(Family::M10, &cod, ShareMode::Full), 4);
        assert_eq!(count_obs_params(Family::M13, &cod, ShareMode::Minimal), 4);
    }

    #[test]
    fn sharing_map_examples() {
        let one = fleets(&[(1, 3)]);
        let full = build_sharing_map(&one, Family::M1, ShareMode::Full);
        let idx: BTreeSet<_> = (1..=3).map(|a| full.index(0, Some(a), ObsRole::Scale).unwrap()).collect();
        assert_eq!(idx.len(), 3);
        let min = build_sharing_map(&one, Family::M1, ShareMode::Minimal);
        for a in 1..=3 {
            assert_eq!(min.index(0, Some(a), ObsRole::Scale), Some(0));
        }
        let two = fleets(&[(1, 2), (1, 2)]);
        let m8 = build_sharing_map(&two, Family::M8, ShareMode::Full);
        assert_eq!(m8.len(), 6);
        assert_eq!(m8.len(), count_obs_params(Family::M8, &two, ShareMode::Full));
        assert!(m8.index(1, None, ObsRole::TotalScale).is_some());
        assert!(m8.index(1, Some(2), ObsRole::Scale).is_none());
    }

    #[test]
    fn transform_examples() {
        let t = Transform::Log;
        assert_eq!(t.to_unconstrained(1.0).unwrap(), 0.0);
        assert_eq!(t.from_unconstrained(0.0), 1.0);
        assert_eq!(Transform::Squash.to_unconstrained(0.0).unwrap(), 0.0);
        assert_eq!(Transform::Squash.from_unconstrained(0.0), 0.0);
        let back = t.from_unconstrained(t.to_unconstrained(2.5).unwrap());
        assert!((back - 2.5).abs() < 1e-12);
        assert!(Transform::Squash.to_unconstrained(1.0).is_err());
        assert!(Transform::Log.to_unconstrained(0.0).is_err());
    }

    proptest! {
        #[test]
        fn full_count_dominates_minimal(spans in prop::collection::vec((1i32..6, 0i32..6), 1..4), fi in 0usize..13) {
            let family = Family::ALL[fi];
            let fs = fleets(&spans.iter().map(|&(a, w)| (a, a + w)).collect::<Vec<_>>());
            let full = count_obs_params(family, &fs, ShareMode::Full);
            let min = count_obs_params(family, &fs, ShareMode::Minimal);
            prop_assert!(full >= min);
            let single_age = fs.iter().all(|f| f.n_ages() == 1);
            if single_age {
                prop_assert_eq!(full, min);
            }
            for mode in [ShareMode::Full, ShareMode::Minimal] {
                let map = build_sharing_map(&fs, family, mode);
                prop_assert_eq!(map.len(), count_obs_params(family, &fs, mode));
                let used: BTreeSet<_> = map.key_map.values().copied().collect();
                prop_assert_eq!(used.len(), map.len());
            }
        }

        #[test]
        fn transforms_round_trip(x in 1e-6f64..1e6, r in -0.999f64..0.999, s in -50.0f64..50.0) {
            let t = Transform::Log;
            prop_assert!((t.from_unconstrained(t.to_unconstrained(x).unwrap()) - x).abs() <= 1e-12 * x.max(1.0));
            let q = Transform::Squash;
            prop_assert!((q.from_unconstrained(q.to_unconstrained(r).unwrap()) - r).abs() <= 1e-12);
            let i = Transform::Identity;
            prop_assert_eq!(i.from_unconstrained(i.to_unconstrained(s).unwrap()), s);
        }
    }
}
