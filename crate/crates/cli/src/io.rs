//! CSV and JSON input and output.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::CliError;

/// Seventeen significant digits, enough to re-parse the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

/// Numeric table read from a CSV file with a header row.
#[derive(Debug, Clone)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// Reads the named columns, or every column when `cols` is `None`.
pub fn read_csv(path: &Path, cols: Option<&[String]>) -> Result<Table, CliError> {
    let input_err = |line: u64, message: String| CliError::Input {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => CliError::io(path, io),
            other => input_err(1, format!("{other:?}")),
        })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| input_err(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(input_err(1, "missing header row".into()));
    }
    if headers.iter().all(|h| h.parse::<f64>().is_ok()) {
        return Err(input_err(1, "header row required; the first line is numeric".into()));
    }
    let selected: Vec<usize> = match cols {
        Some(names) => names
            .iter()
            .map(|n| {
                headers
                    .iter()
                    .position(|h| h == n)
                    .ok_or_else(|| CliError::Usage(format!("--cols: no column named '{n}'")))
            })
            .collect::<Result<_, _>>()?,
        None => (0..headers.len()).collect(),
    };
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            input_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let mut row = Vec::with_capacity(selected.len());
        for &c in &selected {
            let cell = record.get(c).unwrap_or("");
            if cell.is_empty() {
                return Err(input_err(line, format!("missing value in column '{}'", headers[c])));
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| input_err(line, format!("non-numeric value '{cell}' in column '{}'", headers[c])))?;
            if !v.is_finite() {
                return Err(input_err(line, format!("non-finite value in column '{}'", headers[c])));
            }
            row.push(v);
        }
        rows.push(row);
    }
    Ok(Table {
        columns: selected.iter().map(|&c| headers[c].clone()).collect(),
        rows,
    })
}

pub fn write_csv<S: AsRef<str>>(path: &Path, header: &[S], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e.into()))?;
    let flush = |r: csv::Result<()>| r.map_err(|e| CliError::io(path, e.into()));
    flush(w.write_record(header.iter().map(AsRef::as_ref)))?;
    for row in rows {
        flush(w.write_record(&row))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input {
        path: path.to_path_buf(),
        line: e.line() as u64,
        message: e.to_string(),
    })
}
