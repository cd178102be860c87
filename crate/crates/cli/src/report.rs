//! Results table, CSV/JSON emission and degradation-vs-step plot series.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, LabError, Result};

/// One metric of one run at one checkpoint.
///
/// Quantized schemes carry the float score in `pre_value`, the quantized
/// score in `post_value` and the percent difference. Rows for the float
/// model and for diagnostics carry a single value in `pre_value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub variant: String,
    pub seed: u64,
    pub step: u64,
    pub scheme: String,
    pub task: String,
    pub pre_value: f64,
    pub post_value: Option<f64>,
    pub pct_diff: Option<f64>,
}

pub const CSV_HEADER: [&str; 9] =
    ["run_id", "variant", "seed", "step", "scheme", "task", "pre_value", "post_value", "pct_diff"];

/// Canonical order: by run id then step; rows within a checkpoint keep
/// their emission order.
pub fn canonicalize(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| a.run_id.cmp(&b.run_id).then(a.step.cmp(&b.step)));
}

pub fn to_csv(rows: &[ResultRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(CSV_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| LabError::Csv(e.into_error().into()))
}

pub fn from_csv(data: &[u8]) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(data);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(LabError::Config(format!("unexpected CSV header {header:?}")));
    }
    Ok(r.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>()?)
}

/// Mean over runs of the per-checkpoint average percent difference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub step: u64,
    pub avg_pct_diff: f64,
    pub runs: usize,
}

/// `scheme → variant → points ordered by step`.
pub type PlotSeries = BTreeMap<String, BTreeMap<String, Vec<SeriesPoint>>>;

/// Average percent difference per (run, step, scheme) over tasks with a
/// defined difference.
pub fn run_averages(rows: &[ResultRow]) -> BTreeMap<(String, String, u64, String), f64> {
    let mut acc: BTreeMap<(String, String, u64, String), (f64, usize)> = BTreeMap::new();
    for r in rows {
        if let Some(d) = r.pct_diff {
            let e = acc.entry((r.scheme.clone(), r.run_id.clone(), r.step, r.variant.clone())).or_default();
            e.0 += d;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

pub fn plot_series(rows: &[ResultRow]) -> PlotSeries {
    let mut groups: BTreeMap<(String, String, u64), Vec<f64>> = BTreeMap::new();
    for ((scheme, _, step, variant), avg) in run_averages(rows) {
        groups.entry((scheme, variant, step)).or_default().push(avg);
    }
    let mut out = PlotSeries::new();
    for ((scheme, variant, step), v) in groups {
        out.entry(scheme).or_default().entry(variant).or_default().push(SeriesPoint {
            step,
            avg_pct_diff: v.iter().sum::<f64>() / v.len() as f64,
            runs: v.len(),
        });
    }
    out
}

fn plot_series_csv(series: &PlotSeries) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scheme", "variant", "step", "avg_pct_diff", "runs"])?;
    for (scheme, variants) in series {
        for (variant, points) in variants {
            for p in points {
                w.write_record([
                    scheme.clone(),
                    variant.clone(),
                    p.step.to_string(),
                    p.avg_pct_diff.to_string(),
                    p.runs.to_string(),
                ])?;
            }
        }
    }
    w.into_inner().map_err(|e| LabError::Csv(e.into_error().into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(io_err(path))
}

/// Write `results.<ext>` plus the plot series `plot_series.<ext>` into `dir`.
pub fn emit_report(rows: &[ResultRow], format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(LabError::Config("no results to report".into()));
    }
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let series = plot_series(rows);
    let (results, plot) = match format {
        ReportFormat::Csv => (dir.join("results.csv"), dir.join("plot_series.csv")),
        ReportFormat::Json => (dir.join("results.json"), dir.join("plot_series.json")),
    };
    match format {
        ReportFormat::Csv => {
            write(&results, &to_csv(rows)?)?;
            write(&plot, &plot_series_csv(&series)?)?;
        }
        ReportFormat::Json => {
            write(&results, &serde_json::to_vec_pretty(rows)?)?;
            write(&plot, &serde_json::to_vec_pretty(&series)?)?;
        }
    }
    Ok(vec![results, plot])
}

/// Read a results table written by `emit_report`, by extension.
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => Ok(serde_json::from_slice(&bytes)?),
        _ => from_csv(&bytes),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(variant: &str, step: u64, pct: Option<f64>) -> ResultRow {
        ResultRow {
            run_id: "r".into(),
            variant: variant.into(),
            seed: 1,
            step,
            scheme: "int8-w8a8".into(),
            task: "token_prob".into(),
            pre_value: 0.25,
            post_value: Some(0.24),
            pct_diff: pct,
        }
    }

    #[test]
    fn one_record_is_header_plus_row() {
        let text = String::from_utf8(to_csv(&[row("plain", 0, Some(-4.0))]).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], CSV_HEADER.join(","));
        assert_eq!(lines[1], "r,plain,1,0,int8-w8a8,token_prob,0.25,0.24,-4.0");
    }

    #[test]
    fn comma_variant_is_quoted() {
        let text = String::from_utf8(to_csv(&[row("wd=0.1,gc=none", 0, None)]).unwrap()).unwrap();
        assert!(text.contains("\"wd=0.1,gc=none\""));
        assert!(text.ends_with(",0.25,0.24,\n"));
    }

    #[test]
    fn csv_round_trip_is_byte_identical() {
        let rows = vec![row("a,b", 0, Some(-1.0 / 3.0)), row("c\"d", 10, None), row("e", 20, Some(1e-300))];
        let bytes = to_csv(&rows).unwrap();
        let back = from_csv(&bytes).unwrap();
        assert_eq!(back, rows);
        assert_eq!(to_csv(&back).unwrap(), bytes);
    }

    #[test]
    fn series_average_over_tasks_then_runs() {
        let mut rows = vec![row("v", 0, Some(-2.0)), row("v", 0, Some(-4.0)), row("v", 5, Some(1.0))];
        let mut other = row("v", 0, Some(-6.0));
        other.run_id = "r2".into();
        rows.push(other);
        let s = plot_series(&rows);
        let pts = &s["int8-w8a8"]["v"];
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[0], SeriesPoint { step: 0, avg_pct_diff: -4.5, runs: 2 });
        assert_eq!(pts[1], SeriesPoint { step: 5, avg_pct_diff: 1.0, runs: 1 });
    }
}
