//! Dataset files: one CSV per table, all with a header row.
//!
//! ```text
//! fleets.csv         fleet,kind,first_year,last_year,first_age,last_age,timing
//! observations.csv   fleet,year,age,value
//! mortality.csv      year,age,value
//! stock_weights.csv  year,age,value
//! maturity.csv       year,age,value
//! catch_weights.csv  year,age,value[,fleet]
//! ```
//!
//! Rows of `catch_weights.csv` with an empty or absent fleet give the
//! default catch weights; rows naming a fleet override them for that fleet.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use stockobs::{BiologyInputs, Dataset, FleetKind, FleetSpec, YearAgeGrid};

use crate::CliError;

pub const FLEETS: &str = "fleets.csv";
pub const OBSERVATIONS: &str = "observations.csv";
pub const MORTALITY: &str = "mortality.csv";
pub const STOCK_WEIGHTS: &str = "stock_weights.csv";
pub const CATCH_WEIGHTS: &str = "catch_weights.csv";
pub const MATURITY: &str = "maturity.csv";

/// A parsed CSV file: header plus rows with their 1-based line numbers.
struct Table {
    path: PathBuf,
    header: Vec<String>,
    rows: Vec<(usize, Vec<String>)>,
}

impl Table {
    fn read(path: &Path) -> Result<Self, CliError> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(true)
            .from_path(path)
            .map_err(|e| load_error(path, 0, e.to_string()))?;
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| load_error(path, 1, e.to_string()))?
            .iter()
            .map(|h| h.to_ascii_lowercase())
            .collect();
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize);
                load_error(path, line, e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            if rec.iter().all(|f| f.is_empty()) {
                continue;
            }
            if rec.len() != header.len() {
                return Err(load_error(path, line, format!("expected {} fields, found {}", header.len(), rec.len())));
            }
            rows.push((line, rec.iter().map(str::to_string).collect()));
        }
        Ok(Table { path: path.to_path_buf(), header, rows })
    }

    fn require(&self, columns: &[&str]) -> Result<Vec<usize>, CliError> {
        columns
            .iter()
            .map(|c| {
                self.header
                    .iter()
                    .position(|h| h == c)
                    .ok_or_else(|| load_error(&self.path, 1, format!("missing column '{c}'")))
            })
            .collect()
    }

    fn optional(&self, column: &str) -> Option<usize> {
        self.header.iter().position(|h| h == column)
    }

    fn parse<T: std::str::FromStr>(&self, line: usize, field: &str, what: &str) -> Result<T, CliError> {
        field.parse().map_err(|_| load_error(&self.path, line, format!("{what} '{field}' is not a valid number")))
    }
}

fn load_error(path: &Path, line: usize, message: String) -> CliError {
    CliError::Load { file: path.display().to_string(), line, message }
}

fn read_fleets(dir: &Path) -> Result<Vec<FleetSpec>, CliError> {
    let t = Table::read(&dir.join(FLEETS))?;
    let c = t.require(&["fleet", "kind", "first_year", "last_year", "first_age", "last_age"])?;
    let timing = t.optional("timing");
    let mut fleets: Vec<FleetSpec> = Vec::new();
    for (line, r) in &t.rows {
        let line = *line;
        let kind: FleetKind = r[c[1]].parse().map_err(|e: stockobs::Error| load_error(&t.path, line, e.to_string()))?;
        let years = (t.parse(line, &r[c[2]], "first_year")?, t.parse(line, &r[c[3]], "last_year")?);
        let ages = (t.parse(line, &r[c[4]], "first_age")?, t.parse(line, &r[c[5]], "last_age")?);
        let mut fleet = FleetSpec::new(&r[c[0]], kind, years, ages);
        if let Some(i) = timing.filter(|&i| !r[i].is_empty()) {
            fleet = fleet.with_timing(t.parse(line, &r[i], "timing")?);
        }
        if fleets.iter().any(|f| f.name == fleet.name) {
            return Err(load_error(&t.path, line, format!("duplicate fleet '{}'", fleet.name)));
        }
        fleets.push(fleet);
    }
    if fleets.is_empty() {
        return Err(load_error(&t.path, 1, "no fleets".into()));
    }
    Ok(fleets)
}

/// Reads `year,age,value` rows into a grid. Every cell must be present.
fn read_grid(path: &Path, fleet_filter: Option<Option<&str>>) -> Result<Option<YearAgeGrid>, CliError> {
    let t = Table::read(path)?;
    let c = t.require(&["year", "age", "value"])?;
    let fleet_col = t.optional("fleet");
    let mut cells = BTreeMap::new();
    for (line, r) in &t.rows {
        if let Some(want) = fleet_filter {
            let got = fleet_col.map(|i| r[i].as_str()).filter(|s| !s.is_empty());
            if got != want {
                continue;
            }
        }
        let year: i32 = t.parse(*line, &r[c[0]], "year")?;
        let age: i32 = t.parse(*line, &r[c[1]], "age")?;
        let value: f64 = t.parse(*line, &r[c[2]], "value")?;
        if cells.insert((year, age), value).is_some() {
            return Err(load_error(&t.path, *line, format!("duplicate entry for year {year}, age {age}")));
        }
    }
    if cells.is_empty() {
        return Ok(None);
    }
    let years = (cells.keys().map(|k| k.0).min().unwrap(), cells.keys().map(|k| k.0).max().unwrap());
    let ages = (cells.keys().map(|k| k.1).min().unwrap(), cells.keys().map(|k| k.1).max().unwrap());
    let mut grid = YearAgeGrid::new(years, ages, f64::NAN);
    for (&(y, a), &v) in &cells {
        grid.set(y, a, v).map_err(|e| load_error(&t.path, 0, e.to_string()))?;
    }
    for y in years.0..=years.1 {
        for a in ages.0..=ages.1 {
            if !cells.contains_key(&(y, a)) {
                return Err(load_error(&t.path, 0, format!("no value for year {y}, age {a}")));
            }
        }
    }
    Ok(Some(grid))
}

fn required_grid(dir: &Path, name: &str) -> Result<YearAgeGrid, CliError> {
    let path = dir.join(name);
    read_grid(&path, None)?.ok_or_else(|| load_error(&path, 1, "no rows".into()))
}

/// Loads and validates a dataset. Fleet-years with any absent age are
/// excluded in full; they are returned as `(fleet, year)` and logged.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, Vec<(String, i32)>), CliError> {
    let fleets = read_fleets(dir)?;
    let cw_path = dir.join(CATCH_WEIGHTS);
    let catch_weight = read_grid(&cw_path, Some(None))?.ok_or_else(|| load_error(&cw_path, 1, "no default rows".into()))?;
    let mut fleet_catch_weight = BTreeMap::new();
    for f in &fleets {
        if let Some(g) = read_grid(&cw_path, Some(Some(&f.name)))? {
            fleet_catch_weight.insert(f.name.clone(), g);
        }
    }
    let biology = BiologyInputs {
        natural_mortality: required_grid(dir, MORTALITY)?,
        stock_weight: required_grid(dir, STOCK_WEIGHTS)?,
        maturity: required_grid(dir, MATURITY)?,
        catch_weight,
        fleet_catch_weight,
    };

    let t = Table::read(&dir.join(OBSERVATIONS))?;
    let c = t.require(&["fleet", "year", "age", "value"])?;
    let mut records = Vec::with_capacity(t.rows.len());
    for (line, r) in &t.rows {
        let line = *line;
        let f = fleets
            .iter()
            .position(|f| f.name == r[c[0]])
            .ok_or_else(|| load_error(&t.path, line, format!("unknown fleet '{}'", r[c[0]])))?;
        let year: i32 = t.parse(line, &r[c[1]], "year")?;
        let age: i32 = t.parse(line, &r[c[2]], "age")?;
        let value: f64 = t.parse(line, &r[c[3]], "value")?;
        let fleet = &fleets[f];
        if !fleet.contains_year(year) || !(fleet.first_age..=fleet.last_age).contains(&age) {
            return Err(load_error(
                &t.path,
                line,
                format!("year {year}, age {age} outside the span of fleet '{}'", fleet.name),
            ));
        }
        records.push((f, year, age, value));
    }
    let (dataset, excluded) = Dataset::from_records(fleets, &records, biology)
        .map_err(|e| load_error(&t.path, 0, e.to_string()))?;
    for (fleet, year) in &excluded {
        log::warn!("fleet '{fleet}', year {year}: ages missing, year excluded from all likelihoods");
    }
    Ok((dataset, excluded))
}

fn write_grid(w: &mut csv::Writer<fs::File>, grid: &YearAgeGrid, fleet: Option<&str>) -> Result<(), CliError> {
    for y in grid.years.0..=grid.years.1 {
        for a in grid.ages.0..=grid.ages.1 {
            let mut rec = vec![y.to_string(), a.to_string(), grid.at(y, a).to_string()];
            if let Some(f) = fleet {
                rec.push(f.to_string());
            }
            w.write_record(&rec)?;
        }
    }
    Ok(())
}

/// Writes `dataset` in the format [`load_dataset`] reads. Values use the
/// shortest representation that parses back to the same number.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(FLEETS))?;
    w.write_record(["fleet", "kind", "first_year", "last_year", "first_age", "last_age", "timing"])?;
    for f in &dataset.fleets {
        w.write_record([
            f.name.clone(),
            f.kind.to_string(),
            f.first_year.to_string(),
            f.last_year.to_string(),
            f.first_age.to_string(),
            f.last_age.to_string(),
            f.timing.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(OBSERVATIONS))?;
    w.write_record(["fleet", "year", "age", "value"])?;
    for (fleet, obs) in dataset.fleets.iter().zip(&dataset.observations) {
        for (year, values) in obs {
            if fleet.missing_years.contains(year) {
                continue;
            }
            for (age, v) in fleet.ages().zip(values) {
                w.write_record([fleet.name.clone(), year.to_string(), age.to_string(), v.to_string()])?;
            }
        }
    }
    w.flush()?;

    let bio = &dataset.biology;
    for (name, grid) in [(MORTALITY, &bio.natural_mortality), (STOCK_WEIGHTS, &bio.stock_weight), (MATURITY, &bio.maturity)]
    {
        let mut w = csv::Writer::from_path(dir.join(name))?;
        w.write_record(["year", "age", "value"])?;
        write_grid(&mut w, grid, None)?;
        w.flush()?;
    }
    let mut w = csv::Writer::from_path(dir.join(CATCH_WEIGHTS))?;
    if bio.fleet_catch_weight.is_empty() {
        w.write_record(["year", "age", "value"])?;
        write_grid(&mut w, &bio.catch_weight, None)?;
    } else {
        w.write_record(["year", "age", "value", "fleet"])?;
        write_grid(&mut w, &bio.catch_weight, Some(""))?;
        for (fleet, grid) in &bio.fleet_catch_weight {
            write_grid(&mut w, grid, Some(fleet))?;
        }
    }
    w.flush()?;
    Ok(())
}
