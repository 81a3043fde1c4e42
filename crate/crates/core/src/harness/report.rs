//! Error reports: one row per evaluated (condition, method) pair.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub condition: String,
    pub method: String,
    pub sigma2_y: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub n_train: usize,
    pub mean_eps: f64,
    pub std_eps: f64,
    pub n_samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub rows: Vec<ReportRow>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

/// Mean and sample standard deviation; `(0, 0)` for an empty slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

impl ErrorReport {
    pub fn push(&mut self, row: ReportRow) -> Result<()> {
        if !(row.mean_eps >= 0.0) || !(row.std_eps >= 0.0) {
            return Err(Error::invalid(format!(
                "report row `{}`/`{}` has a negative or undefined error",
                row.condition, row.method
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Rows matching a condition label and method name.
    pub fn find(&self, condition: &str, method: &str) -> Vec<&ReportRow> {
        self.rows
            .iter()
            .filter(|r| r.condition == condition && r.method == method)
            .collect()
    }

    pub fn to_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if self.rows.is_empty() {
            w.write_record(COLUMNS).map_err(csv_err)?;
        }
        for row in &self.rows {
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<ReportRow>, _>>()
            .map_err(|e| Error::format(e.position().map_or(0, |p| p.byte()), e.to_string()))?;
        Ok(Self { rows })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))
    }

    /// Writes `<dir>/report.csv` or `<dir>/report.json`, and always the JSON
    /// mirror when CSV is requested.
    pub fn write(&self, dir: &Path, format: ReportFormat) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        if format == ReportFormat::Csv {
            self.to_csv(std::fs::File::create(dir.join("report.csv"))?)?;
        }
        std::fs::write(dir.join("report.json"), self.to_json()?)?;
        Ok(())
    }
}

const COLUMNS: [&str; 12] = [
    "experiment",
    "condition",
    "method",
    "sigma2_y",
    "alpha",
    "beta",
    "gamma",
    "n_train",
    "mean_eps",
    "std_eps",
    "n_samples",
    "seed",
];

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("{other:?}")),
    }
}
