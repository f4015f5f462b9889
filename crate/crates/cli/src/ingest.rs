//! CSV input: a header row, then numeric cells only.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use ehr_core::robust::Dataset;

use crate::CliError;

pub const STATEX77: &str = include_str!("../data/statex77.csv");
pub const NORMAL_SCENARIO: &str = include_str!("../data/homoscedastic_normal.scenario");

/// A parsed numeric table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub source: String,
    pub headers: Vec<String>,
    /// Row-major cells.
    pub rows: Vec<Vec<f64>>,
    /// SHA-256 of the raw bytes, hex.
    pub sha256: String,
}

/// Reads `source`, either a file path or the bundled name `statex77`.
pub fn load_table(source: &str) -> Result<Table, CliError> {
    if source == "statex77" {
        return parse_table("statex77 (bundled)", STATEX77.as_bytes());
    }
    let bytes = std::fs::read(source).map_err(|e| CliError::Input(format!("cannot read '{source}': {e}")))?;
    parse_table(source, &bytes)
}

pub fn parse_table(source: &str, bytes: &[u8]) -> Result<Table, CliError> {
    let bad = |msg: String| CliError::Input(format!("{source}: {msg}"));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| bad(format!("unreadable header: {e}")))?
        .iter()
        .map(str::to_owned)
        .collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(bad("missing header row".into()));
    }
    let mut first_seen: HashMap<&str, usize> = HashMap::new();
    for (j, h) in headers.iter().enumerate() {
        if h.is_empty() {
            return Err(bad(format!("column {} has an empty header", j + 1)));
        }
        if let Some(i) = first_seen.insert(h, j) {
            return Err(bad(format!("duplicate header '{h}' in columns {} and {}", i + 1, j + 1)));
        }
    }

    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { expected_len, len, .. } => bad(format!(
                "data row {} has {len} cells, expected {expected_len}",
                r + 1
            )),
            _ => bad(format!("data row {}: {e}", r + 1)),
        })?;
        let row = record
            .iter()
            .enumerate()
            .map(|(j, cell)| {
                let at = || format!("data row {}, column {} ('{}')", r + 1, j + 1, headers[j]);
                if cell.is_empty() {
                    return Err(bad(format!("{}: blank cell", at())));
                }
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(bad(format!("{}: '{cell}' is not a finite number", at()))),
                }
            })
            .collect::<Result<Vec<f64>, CliError>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(bad("no data rows".into()));
    }
    Ok(Table {
        source: source.to_owned(),
        headers,
        rows,
        sha256: format!("{:x}", Sha256::digest(bytes)),
    })
}

impl Table {
    /// Column index of `spec`: an exact header, else a 1-based column number.
    pub fn column(&self, spec: &str) -> Result<usize, CliError> {
        if let Some(j) = self.headers.iter().position(|h| h == spec) {
            return Ok(j);
        }
        match spec.parse::<usize>() {
            Ok(j) if (1..=self.headers.len()).contains(&j) => Ok(j - 1),
            _ => Err(CliError::Input(format!(
                "{}: no column '{spec}' (columns: {})",
                self.source,
                self.headers.join(", ")
            ))),
        }
    }
}

/// Regression data drawn from a table.
#[derive(Debug, Clone)]
pub struct Design {
    pub data: Dataset<f64>,
    pub response: String,
    pub predictors: Vec<String>,
    /// Sample standard deviations the predictors were divided by.
    pub scales: Option<Vec<f64>>,
}

impl Design {
    /// `response` against every other column, optionally dividing each
    /// predictor by its sample standard deviation (divisor `n − 1`).
    pub fn from_table(table: &Table, response: &str, standardize: bool) -> Result<Self, CliError> {
        let yj = table.column(response)?;
        let cols: Vec<usize> = (0..table.headers.len()).filter(|&j| j != yj).collect();
        if cols.is_empty() {
            return Err(CliError::Input(format!("{}: no predictor columns", table.source)));
        }
        let n = table.rows.len();
        let y = DVector::from_fn(n, |i, _| table.rows[i][yj]);
        let mut x = DMatrix::from_fn(n, cols.len(), |i, j| table.rows[i][cols[j]]);
        let predictors: Vec<String> = cols.iter().map(|&j| table.headers[j].clone()).collect();
        let scales = if standardize {
            let s = sample_sds(&x);
            if let Some(j) = s.iter().position(|v| !(*v > 0.0)) {
                return Err(CliError::Input(format!(
                    "predictor '{}' is constant and cannot be standardized",
                    predictors[j]
                )));
            }
            for (j, sj) in s.iter().enumerate() {
                x.column_mut(j).unscale_mut(*sj);
            }
            Some(s)
        } else {
            None
        };
        let data = Dataset::new(y, x).map_err(|e| CliError::Input(format!("{}: {e}", table.source)))?;
        Ok(Self {
            data,
            response: table.headers[yj].clone(),
            predictors,
            scales,
        })
    }

    /// Maps slopes (or their standard errors) on the fitted scale back to
    /// the original predictor units.
    pub fn to_original(&self, beta: &DVector<f64>) -> DVector<f64> {
        match &self.scales {
            Some(s) => DVector::from_fn(beta.len(), |j, _| beta[j] / s[j]),
            None => beta.clone(),
        }
    }
}

fn sample_sds(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows() as f64;
    x.column_iter()
        .map(|c| {
            let m = c.mean();
            (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt()
        })
        .collect()
}
