//! CSV ingestion and result serialization helpers.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::GroupingFactor;

/// Numeric table with a header row.
#[derive(Debug, Clone)]
pub struct Table {
    pub names: Vec<String>,
    pub values: DMatrix<f64>,
}

fn parse_cell(cell: &str, path: &Path, row: usize, col: usize) -> Result<f64> {
    cell.trim().parse::<f64>().map_err(|_| {
        Error::Data(format!(
            "{}: row {}, column {}: '{}' is not a number",
            path.display(),
            row + 2,
            col + 1,
            cell
        ))
    })
}

pub fn read_table(path: &Path) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let names: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if names.is_empty() {
        return Err(Error::Data(format!("{}: empty header", path.display())));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != names.len() {
            return Err(Error::Data(format!(
                "{}: row {} has {} fields, header has {}",
                path.display(),
                r + 2,
                rec.len(),
                names.len()
            )));
        }
        for (c, cell) in rec.iter().enumerate() {
            let v = parse_cell(cell, path, r, c)?;
            if !v.is_finite() {
                return Err(Error::Data(format!("{}: row {}, column {}: non-finite value", path.display(), r + 2, c + 1)));
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    Ok(Table {
        values: DMatrix::from_row_slice(rows, names.len(), &data),
        names,
    })
}

pub fn read_vector(path: &Path) -> Result<(String, DVector<f64>)> {
    let t = read_table(path)?;
    if t.values.ncols() != 1 {
        return Err(Error::Data(format!("{}: expected one column, found {}", path.display(), t.values.ncols())));
    }
    Ok((t.names[0].clone(), t.values.column(0).into_owned()))
}

/// One grouping factor per column of 1-based integer level codes.
pub fn read_groups(path: &Path) -> Result<Vec<(String, GroupingFactor)>> {
    let t = read_table(path)?;
    t.names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let codes = t
                .values
                .column(c)
                .iter()
                .enumerate()
                .map(|(r, &v)| {
                    if v >= 1.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(Error::Data(format!(
                            "{}: row {}, column '{name}': level codes must be integers >= 1, got {v}",
                            path.display(),
                            r + 2
                        )))
                    }
                })
                .collect::<Result<Vec<usize>>>()?;
            Ok((name.clone(), GroupingFactor::from_one_based(&codes)?))
        })
        .collect()
}

/// Square matrix without header.
pub fn read_square(path: &Path) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        rows.push(rec.iter().enumerate().map(|(c, v)| parse_cell(v, path, r, c)).collect::<Result<_>>()?);
    }
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Data(format!("{}: expected a square matrix", path.display())));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_table(path: &Path, names: &[String], m: &DMatrix<f64>) -> Result<()> {
    let rows: Vec<Vec<String>> = (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| fmt_f64(m[(i, j)])).collect())
        .collect();
    write_csv(path, names, &rows)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let k = f.read(&mut buf)?;
        if k == 0 {
            break;
        }
        h.update(&buf[..k]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
