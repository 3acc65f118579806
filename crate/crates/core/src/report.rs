//! Reading and merging training reports.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::lora::REFERENCE_SCALE_LINE;
use crate::train::REPORT_COLUMNS;

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedReport {
    pub header: Vec<(String, String)>,
    pub rows: Vec<ReportRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub epoch: usize,
    pub step: usize,
    pub lr_factor: f64,
    pub loss_total: f64,
    pub loss_mse: f64,
    pub loss_geo: f64,
    pub geo_residual_val: f64,
    pub mre_val_px: f64,
    pub degenerate_count: usize,
    /// Fields exactly as written, for lossless re-emission.
    pub raw: Vec<String>,
}

impl ParsedReport {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn perr(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        column,
        message: message.into(),
    }
}

fn parse_real(s: &str, line: usize, column: usize) -> Result<f64> {
    if s == "nan" {
        return Ok(f64::NAN);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(perr(line, column, format!("expected a finite number or nan, got {s:?}"))),
    }
}

fn parse_count(s: &str, line: usize, column: usize) -> Result<usize> {
    s.parse::<usize>()
        .map_err(|_| perr(line, column, format!("expected a non-negative integer, got {s:?}")))
}

/// Parses the CSV written by [`crate::train::TrainReport::to_csv`].
pub fn parse_train_report(text: &str) -> Result<ParsedReport> {
    let mut header = Vec::new();
    let mut rows = Vec::new();
    let mut seen_columns = false;
    for (idx, line) in text.lines().enumerate() {
        let n = idx + 1;
        if !seen_columns {
            if let Some(rest) = line.strip_prefix("# ") {
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| perr(n, 3, "header line needs key=value"))?;
                if k.is_empty() || k.contains(',') {
                    return Err(perr(n, 3, format!("bad header key {k:?}")));
                }
                header.push((k.to_string(), v.to_string()));
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols != REPORT_COLUMNS {
                return Err(perr(n, 1, format!("expected columns {}", REPORT_COLUMNS.join(","))));
            }
            seen_columns = true;
            continue;
        }
        if line.is_empty() {
            return Err(perr(n, 1, "empty row"));
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != REPORT_COLUMNS.len() {
            return Err(perr(n, 1, format!("expected {} fields, got {}", REPORT_COLUMNS.len(), f.len())));
        }
        // 1-based column of field i
        let col = |i: usize| 1 + f[..i].iter().map(|s| s.len() + 1).sum::<usize>();
        rows.push(ReportRow {
            epoch: parse_count(f[0], n, col(0))?,
            step: parse_count(f[1], n, col(1))?,
            lr_factor: parse_real(f[2], n, col(2))?,
            loss_total: parse_real(f[3], n, col(3))?,
            loss_mse: parse_real(f[4], n, col(4))?,
            loss_geo: parse_real(f[5], n, col(5))?,
            geo_residual_val: parse_real(f[6], n, col(6))?,
            mre_val_px: parse_real(f[7], n, col(7))?,
            degenerate_count: parse_count(f[8], n, col(8))?,
            raw: f.iter().map(|s| s.to_string()).collect(),
        });
    }
    if !seen_columns {
        return Err(perr(text.lines().count().max(1), 1, "missing column header"));
    }
    Ok(ParsedReport { header, rows })
}

/// Long-format merge: one `run` column followed by the report columns,
/// runs in the order given. Each run's configuration is kept as
/// `# <run>.<key>=<value>` lines.
pub fn merge_reports(runs: &[(String, ParsedReport)]) -> Result<String> {
    let mut names = std::collections::BTreeSet::new();
    for (name, _) in runs {
        if name.is_empty() || name.contains(',') || !names.insert(name.as_str()) {
            return Err(Error::param(format!("run names must be unique, non-empty and comma-free: {name:?}")));
        }
    }
    let mut out = String::new();
    let _ = writeln!(out, "# runs={}", runs.len());
    for (name, r) in runs {
        for (k, v) in &r.header {
            let _ = writeln!(out, "# {name}.{k}={v}");
        }
    }
    if runs.iter().any(|(_, r)| r.get("reference_scale").is_some()) {
        let _ = writeln!(out, "# reference_scale={REFERENCE_SCALE_LINE}");
    }
    let _ = writeln!(out, "run,{}", REPORT_COLUMNS.join(","));
    for (name, r) in runs {
        for row in &r.rows {
            let _ = writeln!(out, "{name},{}", row.raw.join(","));
        }
    }
    Ok(out)
}

/// One line per run with its configuration essentials and final epoch.
pub fn summarize_reports(runs: &[(String, ParsedReport)]) -> String {
    let mut out = String::from("run,mode,lambda,loss_mode,epochs,final_geo_residual_val,final_mre_val_px\n");
    for (name, r) in runs {
        let last = r.rows.last();
        let _ = writeln!(
            out,
            "{name},{},{},{},{},{},{}",
            r.get("mode").unwrap_or(""),
            r.get("lambda").unwrap_or(""),
            r.get("loss_mode").unwrap_or(""),
            r.rows.len(),
            last.map_or(String::new(), |l| l.raw[6].clone()),
            last.map_or(String::new(), |l| l.raw[7].clone()),
        );
    }
    out
}
