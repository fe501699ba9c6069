//! Command-line front end: dataset files, run configuration, comparison
//! reports and SVG figures.

pub mod config;
pub mod io;
pub mod plot;
pub mod report;

use std::path::Path;

use thiserror::Error;

pub use config::RunConfig;
pub use io::{load_dataset, write_dataset};
pub use plot::render_plots;
pub use report::{run_compare, CompareOutcome};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{file}:{line}: {message}")]
    Load { file: String, line: usize, message: String },
    #[error("configuration: {0}")]
    Config(String),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Core(#[from] stockobs::Error),
    #[error("every family failed to fit")]
    AllFailed,
}

impl CliError {
    /// 1 for input problems, 2 when estimation produced nothing.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::AllFailed => 2,
            CliError::Core(e) if !matches!(e, stockobs::Error::Config(_) | stockobs::Error::Data(_)) => 2,
            _ => 1,
        }
    }
}

fn load(data: &Path, config: &Path) -> Result<(RunConfig, stockobs::Dataset), CliError> {
    let config = RunConfig::from_file(config)?;
    let (mut dataset, _) = load_dataset(data)?;
    config.apply_to(&mut dataset)?;
    Ok((config, dataset))
}

/// `fit`: fits the configured families and prints a summary to stdout.
pub fn cmd_fit(data: &Path, config: &Path) -> Result<(), CliError> {
    let (config, dataset) = load(data, config)?;
    let fits = report::fit_families(&config, &dataset)?;
    let mut any = false;
    for (family, r) in &fits {
        match r {
            Ok(f) => {
                any = true;
                println!(
                    "{family} {}: nll {:.4}, AIC {:.4}, k {}, max|grad| {:.2e}, {:?}",
                    family.class(),
                    f.nll,
                    f.aic,
                    f.k,
                    f.convergence.gradient_norm,
                    f.convergence.status
                );
                let se = f.theta_se();
                for (i, (name, v)) in f.names.iter().zip(f.natural()).enumerate() {
                    match &se {
                        Some(se) => println!("  {name:<32} {v:>14.6}   se(unconstrained) {:.4}", se[i]),
                        None => println!("  {name:<32} {v:>14.6}"),
                    }
                }
            }
            Err(e) => println!("{family} {}: failed: {e}", family.class()),
        }
    }
    if any {
        Ok(())
    } else {
        Err(CliError::AllFailed)
    }
}

/// `compare`: fits every family and writes the report to `out`.
pub fn cmd_compare(data: &Path, config: &Path, out: &Path) -> Result<(), CliError> {
    let (config, dataset) = load(data, config)?;
    let outcome = run_compare(&config, &dataset, out)?;
    for r in &outcome.rows {
        let rank = r.rank.map_or("-".to_string(), |k| k.to_string());
        let aic = r.interval.map_or(String::from("-"), |i| format!("[{:.2}, {:.2}]", i.lower, i.upper));
        println!("{:<4} {:<6} AIC {aic:<24} rank {rank:<3} {}", r.family, r.class, r.status);
    }
    if outcome.n_succeeded() == 0 {
        return Err(CliError::AllFailed);
    }
    Ok(())
}

/// `simulate`: writes a simulated dataset plus its true parameter values.
pub fn cmd_simulate(config: &Path, seed: u64, out: &Path) -> Result<(), CliError> {
    let config = RunConfig::from_file(config)?;
    let design = config.sim_design()?;
    let sim = stockobs::simulate(&design, seed)?;
    write_dataset(&sim.dataset, out)?;
    let mut w = csv::Writer::from_path(out.join("truth.csv"))?;
    w.write_record(["parameter", "natural", "unconstrained"])?;
    for ((name, v), u) in design.names.iter().zip(&design.truth).zip(&sim.theta_true) {
        w.write_record([name.clone(), v.to_string(), u.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `plot`: renders the figures of a report directory.
pub fn cmd_plot(report: &Path) -> Result<(), CliError> {
    for p in render_plots(report)? {
        println!("{}", p.display());
    }
    Ok(())
}
