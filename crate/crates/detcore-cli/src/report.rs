//! Flat report rows with CSV serialization and an aligned text table.
//!
//! A report is a list of (label, metric, value) triplets. The CSV form
//! keeps that flat shape so it round-trips losslessly; the text table
//! pivots it into labels as rows and metrics as columns, which is the
//! shape the study commands are read in.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write {path}: {message}")]
    Io { path: String, message: String },
    #[error("bad report row: {0}")]
    Format(String),
}

/// One measurement: which configuration, which metric, what value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub metric: String,
    pub value: f64,
}

impl ReportRow {
    pub fn new(label: impl Into<String>, metric: impl Into<String>, value: f64) -> Self {
        Self {
            label: label.into(),
            metric: metric.into(),
            value,
        }
    }
}

/// Serialize rows to CSV text with a `label,metric,value` header.
///
/// Values use the shortest round-trip float form; infinities render as
/// `inf`/`-inf` and missing values as `NaN`, all of which parse back.
pub fn to_csv(rows: &[ReportRow]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)
            .map_err(|e| ReportError::Format(e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| ReportError::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| ReportError::Format(e.to_string()))
}

/// Parse CSV text produced by [`to_csv`] back into rows.
pub fn from_csv(text: &str) -> Result<Vec<ReportRow>, ReportError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .map(|row| row.map_err(|e| ReportError::Format(e.to_string())))
        .collect()
}

pub fn write_csv(path: &Path, rows: &[ReportRow]) -> Result<(), ReportError> {
    let text = to_csv(rows)?;
    std::fs::write(path, text).map_err(|e| ReportError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn format_value(v: f64) -> String {
    if v.is_nan() {
        "-".to_string()
    } else {
        format!("{v:.4}")
    }
}

/// Render rows as an aligned table: one line per distinct label, one
/// column per distinct metric, both in first-appearance order. Cells
/// without a row show `-`.
pub fn render_table(rows: &[ReportRow]) -> String {
    let mut labels: Vec<&str> = Vec::new();
    let mut metrics: Vec<&str> = Vec::new();
    for row in rows {
        if !labels.contains(&row.label.as_str()) {
            labels.push(&row.label);
        }
        if !metrics.contains(&row.metric.as_str()) {
            metrics.push(&row.metric);
        }
    }

    let cell = |label: &str, metric: &str| -> String {
        rows.iter()
            .find(|r| r.label == label && r.metric == metric)
            .map(|r| format_value(r.value))
            .unwrap_or_else(|| "-".to_string())
    };

    let mut widths: Vec<usize> = Vec::with_capacity(metrics.len() + 1);
    widths.push(labels.iter().map(|l| l.len()).max().unwrap_or(0));
    for &m in &metrics {
        let body = labels.iter().map(|&l| cell(l, m).len()).max().unwrap_or(0);
        widths.push(m.len().max(body));
    }

    let mut out = String::new();
    let _ = write!(out, "{:<w$}", "", w = widths[0]);
    for (i, &m) in metrics.iter().enumerate() {
        let _ = write!(out, "  {:>w$}", m, w = widths[i + 1]);
    }
    out.push('\n');
    for &l in &labels {
        let _ = write!(out, "{:<w$}", l, w = widths[0]);
        for (i, &m) in metrics.iter().enumerate() {
            let _ = write!(out, "  {:>w$}", cell(l, m), w = widths[i + 1]);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Vec<ReportRow> {
        vec![
            ReportRow::new("smooth_l1", "lw=1", 0.75),
            ReportRow::new("smooth_l1", "lw=2", 0.5),
            ReportRow::new("giou", "lw=1", 1.0 / 3.0),
        ]
    }

    #[test]
    fn csv_round_trips() {
        let original = rows();
        let text = to_csv(&original).unwrap();
        assert!(text.starts_with("label,metric,value\n"));
        assert_eq!(from_csv(&text).unwrap(), original);
    }

    #[test]
    fn csv_round_trips_special_values() {
        let original = vec![
            ReportRow::new("a", "m", f64::INFINITY),
            ReportRow::new("b", "m", f64::NEG_INFINITY),
            ReportRow::new("c", "m", 0.1 + 0.2),
        ];
        let back = from_csv(&to_csv(&original).unwrap()).unwrap();
        assert_eq!(back, original);
    }

    #[test]
    fn nan_survives_the_csv_round_trip() {
        let text = to_csv(&[ReportRow::new("x", "m", f64::NAN)]).unwrap();
        let back = from_csv(&text).unwrap();
        assert_eq!(back.len(), 1);
        assert!(back[0].value.is_nan());
    }

    #[test]
    fn table_pivots_labels_by_metrics() {
        let table = render_table(&rows());
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("lw=1") && lines[0].contains("lw=2"));
        assert!(lines[1].starts_with("smooth_l1"));
        assert!(lines[1].contains("0.7500") && lines[1].contains("0.5000"));
        assert!(lines[2].starts_with("giou"));
        assert!(lines[2].contains("0.3333") && lines[2].contains('-'));
    }

    #[test]
    fn table_shows_nan_cells_as_dashes() {
        let table = render_table(&[ReportRow::new("x", "m", f64::NAN)]);
        assert!(table.lines().nth(1).unwrap().ends_with('-'));
    }
}
