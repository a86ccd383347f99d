//! CSV ingestion and atomic output.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use cellrcov::DataMatrix;
use nalgebra::DMatrix;
use tempfile::NamedTempFile;

use crate::CliError;

/// A numeric table with its header.
pub struct Table {
    pub columns: Vec<String>,
    pub data: DataMatrix,
}

fn raw_records(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>), CliError> {
    let file = File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let columns: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        rows.push(rec.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?);
    }
    Ok((columns, rows))
}

fn parse_cell(s: &str, na_token: &str) -> Result<Option<f64>, String> {
    if s.is_empty() || s == na_token {
        return Ok(None);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_nan() => Ok(None),
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(format!("cannot parse '{s}' as a number")),
    }
}

/// Reads a headed CSV of numbers; `na_token` and empty cells are missing.
/// Columns named in `exclude` are returned separately as raw strings.
pub fn read_table(path: &Path, na_token: &str, exclude: Option<&str>) -> Result<(Table, Option<Vec<String>>), CliError> {
    let (header, records) = raw_records(path)?;
    let skip = match exclude {
        Some(name) => Some(
            header
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| CliError::Input(format!("{}: no column named '{name}'", path.display())))?,
        ),
        None => None,
    };
    let columns: Vec<String> = header.iter().enumerate().filter(|&(j, _)| Some(j) != skip).map(|(_, c)| c.clone()).collect();
    if columns.is_empty() || records.is_empty() {
        return Err(CliError::Input(format!("{}: no data", path.display())));
    }
    let mut rows = Vec::with_capacity(records.len());
    let mut extra = skip.map(|_| Vec::with_capacity(records.len()));
    for (i, rec) in records.iter().enumerate() {
        let mut row = Vec::with_capacity(columns.len());
        for (j, cell) in rec.iter().enumerate() {
            if Some(j) == skip {
                if let Some(e) = extra.as_mut() {
                    e.push(cell.to_string());
                }
                continue;
            }
            let v = parse_cell(cell, na_token)
                .map_err(|m| CliError::Input(format!("{}: row {}, column '{}': {m}", path.display(), i + 1, header[j])))?;
            row.push(v);
        }
        rows.push(row);
    }
    let data = DataMatrix::from_rows(&rows).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok((Table { columns, data }, extra))
}

pub fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut tmp = NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// CSV with a header and one line per row.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Io(e.to_string());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn matrix_csv(path: &Path, header: &[String], m: &DMatrix<f64>) -> Result<(), CliError> {
    let rows: Vec<Vec<String>> = m.row_iter().map(|r| r.iter().map(|v| v.to_string()).collect()).collect();
    write_csv(path, header, &rows)
}
