//! SVG figures drawn from a report directory.
//!
//! `aic_intervals.svg` has one vertical segment per fitted family, with
//! dashed grey lines between model classes. `timeseries.svg` overlays F-bar
//! and log SSB for every family. `last_year.svg` shows the final-year
//! estimates with 95% intervals.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::report::{COMPARISON, TIMESERIES};
use crate::CliError;

pub const AIC_PLOT: &str = "aic_intervals.svg";
pub const TIMESERIES_PLOT: &str = "timeseries.svg";
pub const LAST_YEAR_PLOT: &str = "last_year.svg";

const PALETTE: [&str; 13] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
    "#393b79", "#637939", "#843c39",
];
const Z95: f64 = 1.959963984540054;

type Rows = Vec<BTreeMap<String, String>>;

fn read_rows(path: &Path) -> Result<Rows, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Load {
        file: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(header.iter().cloned().zip(rec.iter().map(str::to_string)).collect());
    }
    Ok(rows)
}

fn field(row: &BTreeMap<String, String>, key: &str) -> Option<f64> {
    row.get(key).and_then(|v| v.parse().ok())
}

/// Linear map from data to pixels.
#[derive(Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    from: f64,
    to: f64,
}

impl Axis {
    fn new(values: impl IntoIterator<Item = f64>, from: f64, to: f64) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.into_iter().filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 * lo.abs().max(1.0) };
        Axis { lo: lo - pad, hi: hi + pad, from, to }
    }

    fn map(&self, v: f64) -> f64 {
        self.from + (v - self.lo) / (self.hi - self.lo) * (self.to - self.from)
    }
}

struct Svg(String);

impl Svg {
    fn new(width: f64, height: f64) -> Self {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
        Svg(s)
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, attrs: &str) {
        let _ = writeln!(self.0, r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" {attrs}/>"#);
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, body: &str) {
        let body = body.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
        let _ = writeln!(self.0, r#"<text x="{x:.2}" y="{y:.2}" text-anchor="{anchor}">{body}</text>"#);
    }

    fn y_axis(&mut self, axis: &Axis, x: f64, label: &str) {
        self.line(x, axis.from, x, axis.to, r#"stroke="black""#);
        for v in [axis.lo, axis.hi] {
            self.text(x - 4.0, axis.map(v) + 4.0, "end", &format!("{v:.4}"));
        }
        self.text(x - 4.0, (axis.from + axis.to) / 2.0, "end", label);
    }

    fn finish(mut self) -> String {
        self.0.push_str("</svg>\n");
        self.0
    }
}

fn color(family: &str) -> &'static str {
    let i = family.trim_start_matches('M').parse::<usize>().unwrap_or(1).saturating_sub(1);
    PALETTE[i % PALETTE.len()]
}

fn aic_plot(rows: &Rows) -> String {
    let slot = 50.0;
    let left = 110.0;
    let width = left + slot * rows.len().max(1) as f64 + 20.0;
    let height = 360.0;
    let axis = Axis::new(
        rows.iter().flat_map(|r| [field(r, "aic_lower"), field(r, "aic_upper")]).flatten(),
        height - 50.0,
        30.0,
    );
    let mut svg = Svg::new(width, height);
    svg.text(width / 2.0, 18.0, "middle", "AIC intervals (full model above, minimal bound below)");
    svg.y_axis(&axis, left - 10.0, "AIC");
    for (i, r) in rows.iter().enumerate() {
        let x = left + slot * (i as f64 + 0.5);
        let family = r.get("family").map_or("", String::as_str);
        if i > 0 && rows[i - 1].get("class") != r.get("class") {
            svg.line(x - slot / 2.0, 30.0, x - slot / 2.0, height - 50.0, r#"stroke="grey" stroke-dasharray="5,4""#);
        }
        match (field(r, "aic_lower"), field(r, "aic_upper")) {
            (Some(lo), Some(hi)) => {
                let stroke = if r.get("survived").map(String::as_str) == Some("true") { "black" } else { "#aaaaaa" };
                let _ = writeln!(
                    svg.0,
                    r#"<line class="interval" data-family="{family}" x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{stroke}" stroke-width="3"/>"#,
                    axis.map(lo),
                    axis.map(hi),
                );
            }
            _ => svg.text(x, height - 60.0, "middle", "failed"),
        }
        svg.text(x, height - 32.0, "middle", family);
        svg.text(x, height - 18.0, "middle", r.get("class").map_or("", String::as_str));
    }
    svg.finish()
}

/// `family → [(year, estimate, se)]` for one quantity.
fn series(rows: &Rows, value: &str, se: &str) -> BTreeMap<String, Vec<(f64, f64, f64)>> {
    let mut out: BTreeMap<String, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for r in rows {
        if let (Some(f), Some(y), Some(v)) = (r.get("family"), field(r, "year"), field(r, value)) {
            out.entry(f.clone()).or_default().push((y, v, field(r, se).unwrap_or(f64::NAN)));
        }
    }
    out
}

/// Families ordered by number rather than by string.
fn ordered(map: &BTreeMap<String, Vec<(f64, f64, f64)>>) -> Vec<(&String, &Vec<(f64, f64, f64)>)> {
    let mut v: Vec<_> = map.iter().collect();
    v.sort_by_key(|(f, _)| f.trim_start_matches('M').parse::<usize>().unwrap_or(usize::MAX));
    v
}

const PANELS: [(&str, &str, &str); 2] = [("fbar", "fbar_se", "F-bar"), ("log_ssb", "log_ssb_se", "log SSB")];

fn timeseries_plot(rows: &Rows) -> String {
    let (width, panel_h, left) = (720.0, 240.0, 90.0);
    let mut svg = Svg::new(width, 2.0 * panel_h + 60.0);
    let years = Axis::new(rows.iter().filter_map(|r| field(r, "year")), left, width - 110.0);
    for (p, (value, se, label)) in PANELS.iter().enumerate() {
        let data = series(rows, value, se);
        let top = 30.0 + p as f64 * (panel_h + 20.0);
        let axis = Axis::new(data.values().flatten().map(|t| t.1), top + panel_h - 30.0, top);
        svg.text(width / 2.0, top - 8.0, "middle", label);
        svg.y_axis(&axis, left - 10.0, "");
        svg.line(left - 10.0, top + panel_h - 30.0, width - 110.0, top + panel_h - 30.0, r#"stroke="black""#);
        for (k, (family, pts)) in ordered(&data).into_iter().enumerate() {
            let points: Vec<String> =
                pts.iter().map(|&(y, v, _)| format!("{:.2},{:.2}", years.map(y), axis.map(v))).collect();
            let _ = writeln!(
                svg.0,
                r#"<polyline class="series" data-family="{family}" data-panel="{value}" fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
                color(family),
                points.join(" ")
            );
            if p == 0 {
                let ly = top + 12.0 * k as f64;
                svg.line(width - 100.0, ly, width - 80.0, ly, &format!(r#"stroke="{}" stroke-width="2""#, color(family)));
                svg.text(width - 75.0, ly + 4.0, "start", family);
            }
        }
        if let (Some(lo), Some(hi)) = (
            rows.iter().filter_map(|r| field(r, "year")).reduce(f64::min),
            rows.iter().filter_map(|r| field(r, "year")).reduce(f64::max),
        ) {
            svg.text(years.map(lo), top + panel_h - 14.0, "middle", &lo.to_string());
            svg.text(years.map(hi), top + panel_h - 14.0, "middle", &hi.to_string());
        }
    }
    svg.finish()
}

fn last_year_plot(rows: &Rows) -> String {
    let (panel_w, height, left) = (360.0, 320.0, 80.0);
    let mut svg = Svg::new(2.0 * (panel_w + left), height);
    for (p, (value, se, label)) in PANELS.iter().enumerate() {
        let data = series(rows, value, se);
        let last: Vec<(&String, (f64, f64, f64))> = ordered(&data)
            .into_iter()
            .filter_map(|(f, pts)| pts.iter().copied().max_by(|a, b| a.0.total_cmp(&b.0)).map(|t| (f, t)))
            .collect();
        let x0 = left + p as f64 * (panel_w + left);
        let axis = Axis::new(
            last.iter().flat_map(|(_, (_, v, s))| {
                let s = if s.is_finite() { Z95 * s } else { 0.0 };
                [v - s, v + s]
            }),
            height - 50.0,
            30.0,
        );
        let year = last.first().map_or(String::new(), |(_, t)| t.0.to_string());
        svg.text(x0 + panel_w / 2.0, 18.0, "middle", &format!("{label} in {year} with 95% intervals"));
        svg.y_axis(&axis, x0 - 10.0, "");
        let slot = panel_w / last.len().max(1) as f64;
        for (i, (family, (_, v, s))) in last.iter().enumerate() {
            let x = x0 + slot * (i as f64 + 0.5);
            if s.is_finite() {
                let _ = writeln!(
                    svg.0,
                    r#"<line class="ci" data-family="{family}" x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{}" stroke-width="2"/>"#,
                    axis.map(v - Z95 * s),
                    axis.map(v + Z95 * s),
                    color(family)
                );
            }
            let _ = writeln!(svg.0, r#"<circle cx="{x:.2}" cy="{:.2}" r="3.5" fill="{}"/>"#, axis.map(*v), color(family));
            svg.text(x, height - 32.0, "middle", family);
        }
    }
    svg.finish()
}

/// Writes the three figures into `report_dir` and returns their paths.
pub fn render_plots(report_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    for name in [COMPARISON, TIMESERIES] {
        if !report_dir.join(name).is_file() {
            return Err(CliError::Load {
                file: report_dir.join(name).display().to_string(),
                line: 0,
                message: "report file not found".into(),
            });
        }
    }
    let comparison = read_rows(&report_dir.join(COMPARISON))?;
    let ts = read_rows(&report_dir.join(TIMESERIES))?;
    let outputs = [
        (AIC_PLOT, aic_plot(&comparison)),
        (TIMESERIES_PLOT, timeseries_plot(&ts)),
        (LAST_YEAR_PLOT, last_year_plot(&ts)),
    ];
    let mut paths = Vec::new();
    for (name, body) in outputs {
        let path = report_dir.join(name);
        fs::write(&path, body)?;
        paths.push(path);
    }
    Ok(paths)
}
