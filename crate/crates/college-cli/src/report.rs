//! Structured JSON reports (config echo, seed, per-item records, summary)
//! and a small SVG writer for accuracy-vs-K curves. Everything emitted is
//! byte-deterministic for a fixed seed: no timestamps, no map types with
//! unstable ordering.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use college::error::{CollegeError, Result};

use crate::config::AppConfig;

#[derive(Serialize)]
pub struct Report<S: Serialize, I: Serialize> {
    pub command: String,
    pub seed: u64,
    pub args: BTreeMap<String, String>,
    pub summary: S,
    pub items: I,
    pub config: AppConfig,
}

/// Writes `<reports>/<command>.json` and returns the path.
pub fn emit_report<S: Serialize, I: Serialize>(
    report: &Report<S, I>,
    report_dir: &Path,
) -> Result<PathBuf> {
    std::fs::create_dir_all(report_dir)
        .map_err(|e| CollegeError::io(report_dir.display().to_string(), e))?;
    let path = report_dir.join(format!("{}.json", report.command));
    let p = path.display().to_string();
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| CollegeError::format(&p, e.to_string()))?;
    std::fs::write(&path, json.as_bytes()).map_err(|e| CollegeError::io(&p, e))?;
    Ok(path)
}

pub fn write_error_record(report_dir: &Path, command: &str, error: &str) {
    let _ = std::fs::create_dir_all(report_dir);
    let record = serde_json::json!({ "command": command, "error": error });
    let _ = std::fs::write(
        report_dir.join("error.json"),
        serde_json::to_string_pretty(&record).unwrap_or_default(),
    );
}

/// Minimal line plot: one curve of (k, accuracy) points on fixed axes.
pub fn write_accuracy_plot(
    path: &Path,
    title: &str,
    points: &[(usize, f64)],
) -> Result<()> {
    let p = path.display().to_string();
    if points.is_empty() {
        return Err(CollegeError::InvalidInput("no points to plot".into()));
    }
    let (w, h) = (480.0, 320.0);
    let (ml, mr, mt, mb) = (50.0, 20.0, 40.0, 40.0);
    let k_min = points.iter().map(|p| p.0).min().unwrap() as f64;
    let k_max = points.iter().map(|p| p.0).max().unwrap() as f64;
    let span = (k_max - k_min).max(1.0);
    let x = |k: f64| ml + (k - k_min) / span * (w - ml - mr);
    let y = |a: f64| h - mb - a.clamp(0.0, 1.0) * (h - mt - mb);
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n",
        w / 2.0
    ));
    // axes
    svg.push_str(&format!(
        "  <line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb,
        w - mr,
        h - mb
    ));
    svg.push_str(&format!(
        "  <line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb
    ));
    for tick in 0..=4 {
        let a = tick as f64 / 4.0;
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"10\">{:.2}</text>\n",
            ml - 6.0,
            y(a) + 3.0,
            a
        ));
    }
    for (k, _) in points {
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"10\">{k}</text>\n",
            x(*k as f64),
            h - mb + 16.0
        ));
    }
    svg.push_str("  <text x=\"14\" y=\"170\" font-size=\"11\" transform=\"rotate(-90 14 170)\">accuracy</text>\n");
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"11\">k-shot</text>\n",
        w / 2.0,
        h - 8.0
    ));
    let line: Vec<String> = points
        .iter()
        .map(|(k, a)| format!("{:.2},{:.2}", x(*k as f64), y(*a)))
        .collect();
    svg.push_str(&format!(
        "  <polyline points=\"{}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\"/>\n",
        line.join(" ")
    ));
    for (k, a) in points {
        svg.push_str(&format!(
            "  <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"steelblue\"/>\n",
            x(*k as f64),
            y(*a)
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg.as_bytes()).map_err(|e| CollegeError::io(&p, e))
}
