//! Result tables and their CSV / JSON serializations.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const CODE_VERSION: &str = concat!("robust-student ", env!("CARGO_PKG_VERSION"));
pub const CSV_HEADER: [&str; 7] = [
    "method",
    "seed",
    "condition",
    "accuracy",
    "mean_score",
    "config_hash",
    "code_version",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Format, String> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(format!("unknown format `{other}` (expected csv or json)")),
        }
    }
}

/// One evaluated (method, seed, condition) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub method: String,
    pub seed: u64,
    pub condition: String,
    pub accuracy: f64,
    pub mean_score: f64,
}

/// Mean and standard deviation over seeds for one (method, condition).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub condition: String,
    pub seeds: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Results {
    pub schema_version: u32,
    pub protocol: String,
    pub config_hash: String,
    pub code_version: String,
    pub rows: Vec<Row>,
    pub summary: Vec<Summary>,
    /// Protocol-specific statistics.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

/// `x` rounded to six significant digits.
pub fn sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

/// Six significant digits in plain decimal notation where practical.
pub fn fmt6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..=9).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{x:.5e}")
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Seed statistics per (method, condition) in first-appearance order.
pub fn summarize(rows: &[Row]) -> Vec<Summary> {
    let mut keys: Vec<(&str, &str)> = Vec::new();
    for r in rows {
        let key = (r.method.as_str(), r.condition.as_str());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(method, condition)| {
            let cell: Vec<&Row> = rows
                .iter()
                .filter(|r| r.method == method && r.condition == condition)
                .collect();
            let acc: Vec<f64> = cell.iter().map(|r| r.accuracy).collect();
            let (mean_accuracy, std_accuracy) = mean_std(&acc);
            let scores: Vec<f64> = cell.iter().map(|r| r.mean_score).collect();
            Summary {
                method: method.to_string(),
                condition: condition.to_string(),
                seeds: cell.len(),
                mean_accuracy: sig6(mean_accuracy),
                std_accuracy: sig6(std_accuracy),
                mean_score: sig6(mean_std(&scores).0),
            }
        })
        .collect()
}

impl Results {
    pub fn new(protocol: &str, config_hash: &str, rows: Vec<Row>, extra: serde_json::Value) -> Results {
        let rows: Vec<Row> = rows
            .into_iter()
            .map(|r| Row {
                accuracy: sig6(r.accuracy),
                mean_score: sig6(r.mean_score),
                ..r
            })
            .collect();
        Results {
            schema_version: SCHEMA_VERSION,
            protocol: protocol.to_string(),
            config_hash: config_hash.to_string(),
            code_version: CODE_VERSION.to_string(),
            summary: summarize(&rows),
            rows,
            extra,
        }
    }

    /// Summary entry for a (method, condition) pair.
    pub fn cell(&self, method: &str, condition: &str) -> Option<&Summary> {
        self.summary
            .iter()
            .find(|s| s.method == method && s.condition == condition)
    }

    pub fn to_csv(&self) -> Result<String> {
        if self.rows.is_empty() {
            return Err(CliError::EmptyResults("results table has no rows"));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| CliError::io(Path::new("<csv>"), e.into());
        w.write_record(CSV_HEADER).map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.method.as_str(),
                &r.seed.to_string(),
                r.condition.as_str(),
                &fmt6(r.accuracy),
                &fmt6(r.mean_score),
                &self.config_hash,
                &self.code_version,
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::io(Path::new("<csv>"), e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        if self.rows.is_empty() {
            return Err(CliError::EmptyResults("results table has no rows"));
        }
        let mut text = serde_json::to_string_pretty(self).expect("results serialize");
        text.push('\n');
        Ok(text)
    }

    /// Writes `results.csv` or `results.json` into `dir`; nothing is written
    /// for an empty table.
    pub fn write(&self, dir: &Path, format: Format) -> Result<PathBuf> {
        let (name, text) = match format {
            Format::Csv => ("results.csv", self.to_csv()?),
            Format::Json => ("results.json", self.to_json()?),
        };
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
