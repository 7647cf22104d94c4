use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 10] = [
    "config",
    "corruption",
    "severity",
    "mode",
    "views",
    "samples",
    "skipped",
    "accuracy",
    "samples_per_second",
    "samples_per_second_std",
];

/// One evaluation or adaptation result.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    /// Free-form label of the run configuration.
    pub config: String,
    /// Corruption kind, or `clean`.
    pub corruption: String,
    /// 0 for clean data.
    pub severity: u32,
    pub mode: String,
    pub views: usize,
    pub samples: usize,
    /// Samples whose adaptation step was skipped.
    pub skipped: usize,
    pub accuracy: f64,
    pub samples_per_second: f64,
    pub samples_per_second_std: f64,
}

impl MetricsRow {
    fn record(&self) -> [String; 10] {
        [
            self.config.clone(),
            self.corruption.clone(),
            self.severity.to_string(),
            self.mode.clone(),
            self.views.to_string(),
            self.samples.to_string(),
            self.skipped.to_string(),
            format!("{:.4}", self.accuracy),
            format!("{:.3}", self.samples_per_second),
            format!("{:.3}", self.samples_per_second_std),
        ]
    }
}

/// Header plus one RFC 4180 record per row; accuracy carries 4 decimals.
pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::format(format!("{}: {other:?}", path.display())),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(METRICS_HEADER).map_err(io)?;
    for row in rows {
        w.write_record(row.record()).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let header = r
        .headers()
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?
        .clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(Error::format(format!("{}: unexpected metrics header", path.display())));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse()
                .map_err(|_| parse_err(format!("column {} is not a number", METRICS_HEADER[k])))
        };
        let int = |k: usize| -> Result<usize> {
            rec[k]
                .parse()
                .map_err(|_| parse_err(format!("column {} is not an integer", METRICS_HEADER[k])))
        };
        rows.push(MetricsRow {
            config: rec[0].to_string(),
            corruption: rec[1].to_string(),
            severity: int(2)? as u32,
            mode: rec[3].to_string(),
            views: int(4)?,
            samples: int(5)?,
            skipped: int(6)?,
            accuracy: num(7)?,
            samples_per_second: num(8)?,
            samples_per_second_std: num(9)?,
        });
    }
    Ok(rows)
}
