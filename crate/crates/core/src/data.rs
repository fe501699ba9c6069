//! Observations per fleet and the known biological inputs.

use std::collections::BTreeMap;

use crate::densities_uv::check_observation;
use crate::model_space::{Family, FleetSpec};
use crate::Error;

/// Values over an inclusive year × age rectangle.
#[derive(Clone, Debug, PartialEq)]
pub struct YearAgeGrid {
    pub years: (i32, i32),
    pub ages: (i32, i32),
    values: Vec<f64>,
}

impl YearAgeGrid {
    pub fn new(years: (i32, i32), ages: (i32, i32), fill: f64) -> Self {
        Self::from_fn(years, ages, |_, _| fill)
    }

    pub fn from_fn(years: (i32, i32), ages: (i32, i32), f: impl Fn(i32, i32) -> f64) -> Self {
        let mut values = Vec::new();
        for y in years.0..=years.1 {
            for a in ages.0..=ages.1 {
                values.push(f(y, a));
            }
        }
        YearAgeGrid { years, ages, values }
    }

    pub fn n_years(&self) -> usize {
        (self.years.1 - self.years.0 + 1) as usize
    }

    pub fn n_ages(&self) -> usize {
        (self.ages.1 - self.ages.0 + 1) as usize
    }

    pub fn contains(&self, year: i32, age: i32) -> bool {
        (self.years.0..=self.years.1).contains(&year) && (self.ages.0..=self.ages.1).contains(&age)
    }

    fn offset(&self, year: i32, age: i32) -> usize {
        (year - self.years.0) as usize * self.n_ages() + (age - self.ages.0) as usize
    }

    pub fn get(&self, year: i32, age: i32) -> Option<f64> {
        self.contains(year, age).then(|| self.values[self.offset(year, age)])
    }

    /// Value at `(year, age)`; panics outside the grid.
    pub fn at(&self, year: i32, age: i32) -> f64 {
        assert!(self.contains(year, age), "({year}, {age}) outside grid");
        self.values[self.offset(year, age)]
    }

    pub fn set(&mut self, year: i32, age: i32, v: f64) -> Result<(), Error> {
        if !self.contains(year, age) {
            return Err(Error::Data(format!("({year}, {age}) outside grid {:?} x {:?}", self.years, self.ages)));
        }
        let o = self.offset(year, age);
        self.values[o] = v;
        Ok(())
    }

    /// All ages of one year.
    pub fn row(&self, year: i32) -> &[f64] {
        let o = self.offset(year, self.ages.0);
        &self.values[o..o + self.n_ages()]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Natural mortality, weights and maturity, all assumed known.
#[derive(Clone, Debug, PartialEq)]
pub struct BiologyInputs {
    pub natural_mortality: YearAgeGrid,
    pub stock_weight: YearAgeGrid,
    pub maturity: YearAgeGrid,
    /// Catch weight used by fleets without their own table.
    pub catch_weight: YearAgeGrid,
    pub fleet_catch_weight: BTreeMap<String, YearAgeGrid>,
}

impl BiologyInputs {
    /// Year-constant inputs; `stock_weight` and `maturity` are per age.
    pub fn uniform(years: (i32, i32), ages: (i32, i32), m: f64, stock_weight: &[f64], maturity: &[f64]) -> Self {
        let by_age = |v: &[f64]| YearAgeGrid::from_fn(years, ages, |_, a| v[(a - ages.0) as usize]);
        BiologyInputs {
            natural_mortality: YearAgeGrid::new(years, ages, m),
            stock_weight: by_age(stock_weight),
            maturity: by_age(maturity),
            catch_weight: by_age(stock_weight),
            fleet_catch_weight: BTreeMap::new(),
        }
    }

    pub fn years(&self) -> (i32, i32) {
        self.natural_mortality.years
    }

    pub fn ages(&self) -> (i32, i32) {
        self.natural_mortality.ages
    }

    pub fn catch_weight_for(&self, fleet: &str) -> &YearAgeGrid {
        self.fleet_catch_weight.get(fleet).unwrap_or(&self.catch_weight)
    }

    pub fn validate(&self) -> Result<(), Error> {
        let (years, ages) = (self.years(), self.ages());
        if years.0 >= years.1 || ages.0 >= ages.1 {
            return Err(Error::Data("biology needs at least two years and two ages".into()));
        }
        let grids = [
            ("mortality", &self.natural_mortality),
            ("stock weights", &self.stock_weight),
            ("maturity", &self.maturity),
            ("catch weights", &self.catch_weight),
        ];
        for (name, g) in grids.into_iter().chain(self.fleet_catch_weight.iter().map(|(k, g)| (k.as_str(), g))) {
            if g.years != years || g.ages != ages {
                return Err(Error::Data(format!("{name} grid does not cover years {years:?}, ages {ages:?}")));
            }
        }
        let check = |name: &str, g: &YearAgeGrid, ok: &dyn Fn(f64) -> bool| -> Result<(), Error> {
            for y in years.0..=years.1 {
                for a in ages.0..=ages.1 {
                    let v = g.at(y, a);
                    if !ok(v) {
                        return Err(Error::Data(format!("{name} value {v} invalid at year {y}, age {a}")));
                    }
                }
            }
            Ok(())
        };
        check("mortality", &self.natural_mortality, &|v| v >= 0.0 && v.is_finite())?;
        check("stock weight", &self.stock_weight, &|v| v > 0.0 && v.is_finite())?;
        check("maturity", &self.maturity, &|v| (0.0..=1.0).contains(&v))?;
        check("catch weight", &self.catch_weight, &|v| v > 0.0 && v.is_finite())?;
        for (k, g) in &self.fleet_catch_weight {
            check(&format!("catch weight ({k})"), g, &|v| v > 0.0 && v.is_finite())?;
        }
        Ok(())
    }
}

/// Observations per fleet plus biology.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub fleets: Vec<FleetSpec>,
    /// Per fleet: year → values over the fleet's ages.
    pub observations: Vec<BTreeMap<i32, Vec<f64>>>,
    pub biology: BiologyInputs,
}

impl Dataset {
    pub fn new(
        fleets: Vec<FleetSpec>,
        observations: Vec<BTreeMap<i32, Vec<f64>>>,
        biology: BiologyInputs,
    ) -> Result<Self, Error> {
        let d = Dataset { fleets, observations, biology };
        d.validate()?;
        Ok(d)
    }

    /// Groups `(fleet, year, age, value)` records. A fleet-year lacking any
    /// age is flagged missing in full; the excluded fleet-years are returned.
    pub fn from_records(
        mut fleets: Vec<FleetSpec>,
        records: &[(usize, i32, i32, f64)],
        biology: BiologyInputs,
    ) -> Result<(Self, Vec<(String, i32)>), Error> {
        let mut partial: Vec<BTreeMap<i32, Vec<Option<f64>>>> = vec![BTreeMap::new(); fleets.len()];
        for &(f, y, a, v) in records {
            let fleet = fleets
                .get(f)
                .ok_or_else(|| Error::Data(format!("record for unknown fleet index {f}")))?;
            if !fleet.contains_year(y) || !(fleet.first_age..=fleet.last_age).contains(&a) {
                return Err(Error::Data(format!("fleet '{}': year {y}, age {a} outside its span", fleet.name)));
            }
            let row = partial[f].entry(y).or_insert_with(|| vec![None; fleet.n_ages()]);
            let slot = &mut row[(a - fleet.first_age) as usize];
            if slot.is_some() {
                return Err(Error::Data(format!("fleet '{}': duplicate record for year {y}, age {a}", fleet.name)));
            }
            *slot = Some(v);
        }
        let mut observations = vec![BTreeMap::new(); fleets.len()];
        let mut excluded = Vec::new();
        for (f, fleet) in fleets.iter_mut().enumerate() {
            for y in fleet.first_year..=fleet.last_year {
                let complete = partial[f].get(&y).and_then(|row| row.iter().copied().collect::<Option<Vec<f64>>>());
                match complete {
                    Some(values) if !fleet.missing_years.contains(&y) => {
                        observations[f].insert(y, values);
                    }
                    _ => {
                        if partial[f].contains_key(&y) && !fleet.missing_years.contains(&y) {
                            excluded.push((fleet.name.clone(), y));
                        }
                        fleet.missing_years.insert(y);
                    }
                }
            }
        }
        Ok((Dataset::new(fleets, observations, biology)?, excluded))
    }

    pub fn years(&self) -> (i32, i32) {
        self.biology.years()
    }

    pub fn ages(&self) -> (i32, i32) {
        self.biology.ages()
    }

    pub fn n_years(&self) -> usize {
        (self.years().1 - self.years().0 + 1) as usize
    }

    pub fn n_ages(&self) -> usize {
        (self.ages().1 - self.ages().0 + 1) as usize
    }

    /// Observation vector of a fleet-year that enters the likelihood.
    pub fn usable(&self, fleet: usize, year: i32) -> Option<&[f64]> {
        if self.fleets[fleet].missing_years.contains(&year) {
            return None;
        }
        self.observations[fleet].get(&year).map(|v| v.as_slice())
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.biology.validate()?;
        if self.fleets.is_empty() {
            return Err(Error::Data("no fleets".into()));
        }
        if self.fleets.len() != self.observations.len() {
            return Err(Error::Dimension("one observation table per fleet expected".into()));
        }
        let years = self.years();
        for (fleet, obs) in self.fleets.iter().zip(&self.observations) {
            fleet.validate(self.ages())?;
            if fleet.first_year < years.0 || fleet.last_year > years.1 {
                return Err(Error::Data(format!(
                    "fleet '{}' years {}-{} outside the biology years {}-{}",
                    fleet.name, fleet.first_year, fleet.last_year, years.0, years.1
                )));
            }
            for (y, v) in obs {
                if !fleet.contains_year(*y) {
                    return Err(Error::Data(format!("fleet '{}': observation year {y} outside its span", fleet.name)));
                }
                if v.len() != fleet.n_ages() {
                    return Err(Error::Dimension(format!(
                        "fleet '{}' year {y}: {} values for {} ages",
                        fleet.name,
                        v.len(),
                        fleet.n_ages()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Checks every usable observation against the support of `family`.
    pub fn check_family(&self, family: Family) -> Result<(), Error> {
        for (f, fleet) in self.fleets.iter().enumerate() {
            for (&y, values) in &self.observations[f] {
                if self.usable(f, y).is_none() {
                    continue;
                }
                for (age, &x) in fleet.ages().zip(values) {
                    check_observation(family, x)
                        .map_err(|e| e.with_context(&format!("fleet '{}', year {y}, age {age}", fleet.name)))?;
                }
            }
        }
        Ok(())
    }

    /// Flags `(fleet, year)` missing while keeping its rows.
    pub fn flag_missing(&mut self, fleet: usize, year: i32) {
        self.fleets[fleet].missing_years.insert(year);
    }

    /// Deletes the rows of `(fleet, year)`.
    pub fn remove_year(&mut self, fleet: usize, year: i32) {
        self.observations[fleet].remove(&year);
    }

    /// Number of usable scalar observations.
    pub fn n_observations(&self) -> usize {
        (0..self.fleets.len())
            .map(|f| {
                self.observations[f].keys().filter(|&&y| self.usable(f, y).is_some()).count() * self.fleets[f].n_ages()
            })
            .sum()
    }
}
