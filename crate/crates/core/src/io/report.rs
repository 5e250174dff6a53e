//! Run reports: per-case registration results collected into a CSV table
//! with per-mode summary statistics.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::metrics::MetricsReport;

/// Everything `register` records about one completed case.  Serialized as
/// the per-case `metrics.json` (metrics fields inlined at the top level) and
/// aggregated into the run report CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    /// Loss preset the run used: "mDSC", "SDM" or "MIX".
    pub mode: String,
    #[serde(flatten)]
    pub metrics: MetricsReport,
    /// Optimizer iterations actually spent, summed over pyramid stages.
    pub iterations: usize,
    pub wall_time_s: f64,
}

/// CSV column order, frozen so downstream tooling can rely on it.
pub const REPORT_COLUMNS: [&str; 10] = [
    "case_id",
    "mode",
    "dsc_whole",
    "dsc_base",
    "dsc_mid",
    "dsc_apex",
    "tre_mm",
    "jac_grad_x100",
    "iterations",
    "wall_time_s",
];

/// Formats with six significant digits in plain decimal notation.
pub fn fmt_sig6(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    if v == 0.0 {
        return "0.000000".to_string();
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    format!("{v:.decimals$}")
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than two values.
fn sample_sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// "mean(median)±sd" over a non-empty slice; empty slices yield an empty cell.
fn summary_cell(values: &[f64]) -> String {
    if values.is_empty() {
        return String::new();
    }
    format!(
        "{}({})\u{b1}{}",
        fmt_sig6(mean(values)),
        fmt_sig6(median(values)),
        fmt_sig6(sample_sd(values))
    )
}

fn record_row(r: &CaseRecord) -> String {
    let tre = r.metrics.tre_mm.map(fmt_sig6).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        r.case_id,
        r.mode,
        fmt_sig6(r.metrics.dsc_whole),
        fmt_sig6(r.metrics.dsc_base),
        fmt_sig6(r.metrics.dsc_mid),
        fmt_sig6(r.metrics.dsc_apex),
        tre,
        fmt_sig6(r.metrics.jac_grad * 100.0),
        r.iterations,
        fmt_sig6(r.wall_time_s)
    )
}

fn summary_row(mode: &str, group: &[&CaseRecord]) -> String {
    let col = |f: &dyn Fn(&CaseRecord) -> f64| -> String {
        summary_cell(&group.iter().map(|r| f(r)).collect::<Vec<_>>())
    };
    let tre: Vec<f64> = group.iter().filter_map(|r| r.metrics.tre_mm).collect();
    format!(
        "summary,{},{},{},{},{},{},{},{},{}",
        mode,
        col(&|r| r.metrics.dsc_whole),
        col(&|r| r.metrics.dsc_base),
        col(&|r| r.metrics.dsc_mid),
        col(&|r| r.metrics.dsc_apex),
        summary_cell(&tre),
        col(&|r| r.metrics.jac_grad * 100.0),
        col(&|r| r.iterations as f64),
        col(&|r| r.wall_time_s)
    )
}

/// Renders the report as CSV text: header, per-case rows sorted by
/// (case id, mode), then one "summary" row per mode holding
/// "mean(median)±sd" cells recomputable from the rows above it.
pub fn render_report(records: &[CaseRecord]) -> String {
    let mut sorted: Vec<&CaseRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (&a.case_id, &a.mode).cmp(&(&b.case_id, &b.mode)));

    let mut out = String::new();
    out.push_str(&REPORT_COLUMNS.join(","));
    out.push('\n');
    for r in &sorted {
        out.push_str(&record_row(r));
        out.push('\n');
    }

    let mut modes: Vec<&str> = sorted.iter().map(|r| r.mode.as_str()).collect();
    modes.sort_unstable();
    modes.dedup();
    for mode in modes {
        let group: Vec<&CaseRecord> = sorted
            .iter()
            .filter(|r| r.mode == mode)
            .copied()
            .collect();
        out.push_str(&summary_row(mode, &group));
        out.push('\n');
    }
    out
}

/// Writes the report CSV to disk.  Output bytes are a pure function of the
/// records, so identical inputs always serialize identically.
pub fn write_report(records: &[CaseRecord], path: &Path) -> Result<(), Error> {
    fs::write(path, render_report(records)).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
