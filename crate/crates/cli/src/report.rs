//! Multi-family comparison runs and their report files.
//!
//! ```text
//! comparison.csv   one row per family: nll, k, AIC interval, survival, rank
//! estimates.csv    θ̂ per family on both scales with standard errors, and CVs
//! timeseries.csv   F-bar and log SSB per family and year with standard errors
//! metadata.txt     seed, tolerances, versions
//! ```
//!
//! Numbers are written in their shortest round-trip form, so identical
//! inputs give byte-identical files. Missing values are empty cells.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use stockobs::{
    comparison_rows, delta_se, fit, ComparisonRow, Dataset, Family, FitResult, NaturalFunctional, ObsCvFunctional,
};

use crate::config::RunConfig;
use crate::CliError;

pub const COMPARISON: &str = "comparison.csv";
pub const ESTIMATES: &str = "estimates.csv";
pub const TIMESERIES: &str = "timeseries.csv";
pub const METADATA: &str = "metadata.txt";

/// Environment variable holding the number of families fitted at once.
pub const THREADS_VAR: &str = "STOCKOBS_THREADS";

pub struct CompareOutcome {
    pub rows: Vec<ComparisonRow>,
    pub fits: Vec<(Family, Result<FitResult, stockobs::Error>)>,
}

impl CompareOutcome {
    pub fn n_succeeded(&self) -> usize {
        self.fits.iter().filter(|(_, r)| r.is_ok()).count()
    }
}

fn threads() -> usize {
    std::env::var(THREADS_VAR).ok().and_then(|v| v.parse().ok()).unwrap_or(0)
}

/// Fits every configured family; failures stay in their slot.
pub fn fit_families(config: &RunConfig, dataset: &Dataset) -> Result<Vec<(Family, Result<FitResult, stockobs::Error>)>, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads())
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let options = config.fit_options();
    Ok(pool.install(|| {
        config
            .families
            .par_iter()
            .map(|&family| {
                let result = dataset.check_family(family).and_then(|_| fit(&config.spec(family), dataset, &options));
                match &result {
                    Ok(f) => log::info!("{family}: nll {} ({:?})", f.nll, f.convergence.status),
                    Err(e) => log::warn!("{family}: {e}"),
                }
                (family, result)
            })
            .collect()
    }))
}

fn num(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), num)
}

fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut s = String::from("family,class,nll,k,p_full,p_min,aic_lower,aic_upper,width,survived,rank,status\n");
    for r in rows {
        let iv = r.interval.as_ref();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.family,
            r.class,
            opt(r.nll),
            r.k.map_or(String::new(), |k| k.to_string()),
            iv.map_or(String::new(), |i| i.p_full.to_string()),
            iv.map_or(String::new(), |i| i.p_min.to_string()),
            opt(iv.map(|i| i.lower)),
            opt(iv.map(|i| i.upper)),
            opt(iv.map(|i| i.width())),
            r.survived,
            r.rank.map_or(String::new(), |k| k.to_string()),
            csv_field(&r.status),
        );
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn estimates_csv(fits: &[(Family, Result<FitResult, stockobs::Error>)]) -> String {
    let mut s = String::from("family,parameter,estimate,se,natural,natural_se\n");
    for (family, r) in fits {
        let Ok(f) = r else { continue };
        let se = f.theta_se();
        let natural = f.natural();
        let natural_se = delta_se(f, &NaturalFunctional::for_fit(f)).ok();
        for i in 0..f.names.len() {
            let _ = writeln!(
                s,
                "{family},{},{},{},{},{}",
                f.names[i],
                num(f.theta_hat[i]),
                opt(se.as_ref().map(|v| v[i])),
                num(natural[i]),
                opt(natural_se.as_ref().map(|v| v[i].2)),
            );
        }
        let cv = ObsCvFunctional::for_fit(f);
        match delta_se(f, &cv) {
            Ok(rows) => {
                for (name, v, e) in rows {
                    let _ = writeln!(s, "{family},{name},,,{},{}", num(v), num(e));
                }
            }
            Err(_) => {
                let theta: Vec<f64> = f.theta_hat.clone();
                for (name, v) in stockobs::Functional::names(&cv).into_iter().zip(stockobs::Functional::eval(&cv, &theta)) {
                    let _ = writeln!(s, "{family},{name},,,{},", num(v));
                }
            }
        }
    }
    s
}

fn timeseries_csv(fits: &[(Family, Result<FitResult, stockobs::Error>)]) -> String {
    let mut s = String::from("family,year,fbar,fbar_se,log_ssb,log_ssb_se\n");
    for (family, r) in fits {
        let Ok(f) = r else { continue };
        for (fb, ssb) in f.fbar.iter().zip(&f.log_ssb) {
            let _ = writeln!(s, "{family},{},{},{},{},{}", fb.year, num(fb.estimate), num(fb.se), num(ssb.estimate), num(ssb.se));
        }
    }
    s
}

fn metadata(config: &RunConfig, dataset: &Dataset) -> String {
    let years = dataset.years();
    let ages = dataset.ages();
    let families: Vec<String> = config.families.iter().map(|f| f.to_string()).collect();
    format!(
        "version = {}\nfamilies = {}\nseed = {}\ngrad_tol = {}\ninner_tol = {}\nmax_restarts = {}\n\
         jacobian = {}\nyears = {}-{}\nages = {}-{}\nfleets = {}\n",
        env!("CARGO_PKG_VERSION"),
        families.join(", "),
        config.seed,
        config.grad_tol,
        config.inner_tol,
        config.max_restarts,
        config.jacobian,
        years.0,
        years.1,
        ages.0,
        ages.1,
        dataset.fleets.iter().map(|f| f.name.as_str()).collect::<Vec<_>>().join(", "),
    )
}

/// Fits all configured families and writes the report into `out`.
pub fn run_compare(config: &RunConfig, dataset: &Dataset, out: &Path) -> Result<CompareOutcome, CliError> {
    let fits = fit_families(config, dataset)?;
    let rows = comparison_rows(&fits, &dataset.fleets);
    fs::create_dir_all(out)?;
    fs::write(out.join(COMPARISON), comparison_csv(&rows))?;
    fs::write(out.join(ESTIMATES), estimates_csv(&fits))?;
    fs::write(out.join(TIMESERIES), timeseries_csv(&fits))?;
    fs::write(out.join(METADATA), metadata(config, dataset))?;
    Ok(CompareOutcome { rows, fits })
}
