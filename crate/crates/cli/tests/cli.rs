use std::fs;
use std::path::Path;
use std::process::Command;

use stockobs::{simulate, Family, SimDesign};
use stockobs_cli::{load_dataset, render_plots, run_compare, write_dataset, CliError, RunConfig};

fn write_sim(family: Family, seed: u64, dir: &Path) -> stockobs::Dataset {
    let data = simulate(&SimDesign::standard(family), seed).unwrap().dataset;
    write_dataset(&data, dir).unwrap();
    data
}

fn edit(path: &Path, f: impl FnOnce(String) -> String) {
    let text = fs::read_to_string(path).unwrap();
    fs::write(path, f(text)).unwrap();
}

fn load_err(dir: &Path) -> (String, usize, String) {
    match load_dataset(dir) {
        Err(CliError::Load { file, line, message }) => (file, line, message),
        other => panic!("expected a load error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn malformed_values_report_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    write_sim(Family::M1, 0, dir.path());
    edit(&dir.path().join("observations.csv"), |s| {
        let mut lines: Vec<String> = s.lines().map(str::to_string).collect();
        lines[4] = "commercial,1981,2,abc".into();
        lines.join("\n") + "\n"
    });
    let (file, line, message) = load_err(dir.path());
    assert!(file.ends_with("observations.csv"));
    assert_eq!(line, 5);
    assert!(message.contains("abc"), "{message}");
}

#[test]
fn rows_outside_a_fleet_span_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_sim(Family::M1, 0, dir.path());
    edit(&dir.path().join("observations.csv"), |s| s + "survey,2030,2,1.0\n");
    let (_, line, message) = load_err(dir.path());
    assert!(line > 1);
    assert!(message.contains("2030") && message.contains("survey"), "{message}");

    write_sim(Family::M1, 0, dir.path());
    edit(&dir.path().join("observations.csv"), |s| s + "nowhere,1990,2,1.0\n");
    assert!(load_err(dir.path()).2.contains("nowhere"));

    write_sim(Family::M1, 0, dir.path());
    edit(&dir.path().join("fleets.csv"), |s| s.replace("first_age", "age_from"));
    let (_, line, message) = load_err(dir.path());
    assert_eq!(line, 1);
    assert!(message.contains("first_age"));
}

#[test]
fn partly_observed_years_are_excluded() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_sim(Family::M1, 3, dir.path());
    edit(&dir.path().join("observations.csv"), |s| {
        s.lines().filter(|l| !l.starts_with("commercial,1990,3,")).map(|l| format!("{l}\n")).collect()
    });
    let (loaded, excluded) = load_dataset(dir.path()).unwrap();
    assert_eq!(excluded, vec![("commercial".to_string(), 1990)]);
    assert!(loaded.usable(0, 1990).is_none());
    assert_eq!(loaded.usable(0, 1991), data.usable(0, 1991));
}

#[test]
fn fleet_specific_catch_weights_are_kept_apart() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_sim(Family::M11, 1, dir.path());
    edit(&dir.path().join("catch_weights.csv"), |s| s + "1985,2,9.5,commercial\n");
    let err = load_dataset(dir.path()).unwrap_err();
    // one commercial row is not a full grid
    assert!(matches!(err, CliError::Load { .. }), "{err}");
    let (loaded, _) = {
        write_dataset(&data, dir.path()).unwrap();
        load_dataset(dir.path()).unwrap()
    };
    assert_eq!(loaded, data);
}

#[test]
fn comparison_keeps_going_past_a_failed_family() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = simulate(&SimDesign::standard(Family::M4), 2).unwrap().dataset;
    data.observations[1].get_mut(&2000).unwrap()[1] = 0.0;
    let config = RunConfig::parse("families = M1, M4\n").unwrap();
    let outcome = run_compare(&config, &data, dir.path()).unwrap();
    assert_eq!(outcome.n_succeeded(), 1);
    let csv = fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
    let m1 = csv.lines().find(|l| l.starts_with("M1,")).unwrap();
    assert!(m1.contains("failed") || m1.contains("outside"), "{m1}");
    let m4 = csv.lines().find(|l| l.starts_with("M4,")).unwrap();
    assert!(m4.contains(",true,1,"), "{m4}");
}

#[test]
fn comparison_report_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(&SimDesign::standard(Family::M7), 6).unwrap().dataset;
    let config = RunConfig::parse("families = M1, M7\n").unwrap();
    let outcome = run_compare(&config, &data, dir.path()).unwrap();
    assert_eq!(outcome.n_succeeded(), 2);
    for row in &outcome.rows {
        let iv = row.interval.unwrap();
        assert_eq!(iv.upper - iv.lower, 2.0 * (iv.p_full - iv.p_min) as f64);
    }

    let mut reader = csv::Reader::from_path(dir.path().join("comparison.csv")).unwrap();
    let header = reader.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    for rec in reader.records() {
        let rec = rec.unwrap();
        let num = |name: &str| rec[col(name)].parse::<f64>().unwrap();
        assert_eq!(num("aic_upper") - num("aic_lower"), 2.0 * (num("p_full") - num("p_min")));
        assert_eq!(num("width"), num("aic_upper") - num("aic_lower"));
    }
    let estimates = fs::read_to_string(dir.path().join("estimates.csv")).unwrap();
    assert!(estimates.lines().any(|l| l.starts_with("M7,commercial.cor,")));
    let series = fs::read_to_string(dir.path().join("timeseries.csv")).unwrap();
    assert_eq!(series.lines().count(), 1 + 2 * 40);

    let plots = render_plots(dir.path()).unwrap();
    assert_eq!(plots.len(), 3);
    let doc_of = |name: &str| fs::read_to_string(dir.path().join(name)).unwrap();
    let intervals = doc_of("aic_intervals.svg");
    let doc = roxmltree::Document::parse(&intervals).unwrap();
    let lines: Vec<_> = doc.descendants().filter(|n| n.attribute("class") == Some("interval")).collect();
    assert_eq!(lines.len(), 2);
    // M1 and M7 sit in different classes
    assert!(doc.descendants().any(|n| n.attribute("stroke-dasharray").is_some()));

    let ts = doc_of("timeseries.svg");
    let doc = roxmltree::Document::parse(&ts).unwrap();
    for family in ["M1", "M7"] {
        for panel in ["fbar", "log_ssb"] {
            let n = doc
                .descendants()
                .filter(|n| n.attribute("data-family") == Some(family) && n.attribute("data-panel") == Some(panel))
                .count();
            assert_eq!(n, 1, "{family} {panel}");
        }
    }
    let last = doc_of("last_year.svg");
    let doc = roxmltree::Document::parse(&last).unwrap();
    assert_eq!(doc.descendants().filter(|n| n.attribute("class") == Some("ci")).count(), 4);
}

#[test]
fn plotting_needs_a_report() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(render_plots(dir.path()), Err(CliError::Load { .. })));
}

#[test]
fn configuration_checked_against_the_data() {
    let mut data = simulate(&SimDesign::standard(Family::M1), 0).unwrap().dataset;
    let bad_fbar = RunConfig::parse("fbar_ages = 2-9\n").unwrap();
    assert!(matches!(bad_fbar.apply_to(&mut data), Err(CliError::Config(_))));
    let bad_fleet = RunConfig::parse("timing.acoustic = 0.5\n").unwrap();
    assert!(matches!(bad_fleet.apply_to(&mut data), Err(CliError::Config(_))));
    let ok = RunConfig::parse("timing.survey = 0.6\n").unwrap();
    ok.apply_to(&mut data).unwrap();
    assert_eq!(data.fleets[1].timing, 0.6);
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_stockobs")).args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.cfg");
    fs::write(&config, "sim.family = M1\nfamilies = M1\n").unwrap();
    let data = dir.path().join("data");
    let (code, _, err) = run(&["simulate", "--config", config.to_str().unwrap(), "--seed", "4", "--out", data.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert!(data.join("truth.csv").exists());

    let bad_config = dir.path().join("bad.cfg");
    fs::write(&bad_config, "families = M99\n").unwrap();
    let (code, _, err) = run(&["fit", "--data", data.to_str().unwrap(), "--config", bad_config.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("line 1"), "{err}");

    edit(&data.join("mortality.csv"), |s| s.replacen("0.2", "x", 1));
    let (code, _, err) = run(&["fit", "--data", data.to_str().unwrap(), "--config", config.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("mortality.csv:2"), "{err}");
}
