//! Report files: csv and json carry every number at full precision, svg is a
//! static plot.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::ablation::AblationResult;
use super::metrics::EvalReport;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Svg,
}

impl FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "svg" => Ok(Self::Svg),
            _ => Err(Error::UnsupportedFormat(s.to_string())),
        }
    }
}

impl ReportFormat {
    /// Format implied by a file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        path.extension()
            .and_then(|e| e.to_str())
            .ok_or_else(|| Error::UnsupportedFormat(path.display().to_string()))?
            .parse()
    }

    pub fn extension(self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Json => "json",
            Self::Svg => "svg",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Report<'a> {
    Eval(&'a EvalReport),
    Ablation(&'a AblationResult),
}

pub fn render_report(report: Report<'_>, format: ReportFormat) -> Result<String> {
    Ok(match (report, format) {
        (Report::Eval(r), ReportFormat::Json) => serde_json::to_string_pretty(r)?,
        (Report::Ablation(r), ReportFormat::Json) => serde_json::to_string_pretty(r)?,
        (Report::Eval(r), ReportFormat::Csv) => eval_csv(r),
        (Report::Ablation(r), ReportFormat::Csv) => ablation_csv(r),
        (Report::Eval(r), ReportFormat::Svg) => eval_svg(r),
        (Report::Ablation(r), ReportFormat::Svg) => ablation_svg(r),
    })
}

pub fn emit_report(report: Report<'_>, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    std::fs::write(path, render_report(report, format)?)?;
    Ok(())
}

// `{}` on f64 prints the shortest string that parses back to the same value.
fn ablation_csv(r: &AblationResult) -> String {
    let mut s = String::from("K,flagged_rate,context_alignment_mean\n");
    for row in &r.rows {
        let _ = writeln!(s, "{},{},{}", row.k, row.flagged_rate, row.context_alignment_mean);
    }
    s
}

fn eval_csv(r: &EvalReport) -> String {
    let mut s = String::from("mode,n_samples,flagged_rate,context_alignment_mean\n");
    let _ = writeln!(s, "all,{},{},{}", r.n_samples, r.flagged_rate, r.context_alignment_mean);
    for m in &r.per_mode {
        let label = m.mode.map_or_else(|| "none".to_string(), |k| k.to_string());
        let _ = writeln!(s, "{label},{},{},{}", m.n_samples, m.flagged_rate, m.context_alignment_mean);
    }
    s
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;

fn svg_open(title: &str) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{title}</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n",
        W / 2.0,
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD,
    )
}

fn y_of(v: f64) -> f64 {
    H - PAD - v.clamp(0.0, 1.0) * (H - 2.0 * PAD)
}

fn polyline(points: &[(f64, f64)], color: &str) -> String {
    let pts: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let mut s = format!("<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n", pts.join(" "));
    for (x, y) in points {
        let _ = writeln!(s, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"{color}\"/>");
    }
    s
}

/// Flagged rate and context alignment against K, both on a [0, 1] axis.
fn ablation_svg(r: &AblationResult) -> String {
    let mut s = svg_open("K ablation");
    let n = r.rows.len().max(2) as f64 - 1.0;
    let x_of = |i: usize| PAD + i as f64 / n * (W - 2.0 * PAD);
    let flag: Vec<(f64, f64)> = r.rows.iter().enumerate().map(|(i, row)| (x_of(i), y_of(row.flagged_rate))).collect();
    let align: Vec<(f64, f64)> = r
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| (x_of(i), y_of(row.context_alignment_mean)))
        .collect();
    s.push_str(&polyline(&flag, "crimson"));
    s.push_str(&polyline(&align, "steelblue"));
    for (i, row) in r.rows.iter().enumerate() {
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
            x_of(i),
            H - PAD + 16.0,
            row.k
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"crimson\">flagged_rate</text>\n\
         <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"steelblue\">context_alignment_mean</text>",
        W - PAD - 140.0,
        PAD - 8.0,
        W - PAD - 140.0,
        PAD + 6.0,
    );
    s.push_str("</svg>\n");
    s
}

/// Per-mode flagged-rate bars.
fn eval_svg(r: &EvalReport) -> String {
    let mut s = svg_open("flagged rate by mode");
    let n = r.per_mode.len().max(1) as f64;
    let slot = (W - 2.0 * PAD) / n;
    for (i, m) in r.per_mode.iter().enumerate() {
        let x = PAD + i as f64 * slot + slot * 0.2;
        let y = y_of(m.flagged_rate);
        let label = m.mode.map_or_else(|| "none".to_string(), |k| format!("mode {k}"));
        let _ = writeln!(
            s,
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"crimson\"/>\n\
             <text x=\"{:.2}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{label}</text>",
            slot * 0.6,
            H - PAD - y,
            x + slot * 0.3,
            H - PAD + 16.0,
        );
    }
    s.push_str("</svg>\n");
    s
}
