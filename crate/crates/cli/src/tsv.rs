//! Headerless numeric TSV matrices and vectors.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .from_path(path)
        .map_err(|e| format!("{}: {e}", path.display()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| format!("{}: {e}", path.display()))?;
        let row = record
            .iter()
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| format!("{}, line {}: {e}", path.display(), line + 1))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(format!("{}: empty matrix", path.display()).into());
    }
    let cols = rows[0].len();
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

pub fn read_vector(path: &Path) -> Result<DVector<f64>> {
    let m = read_matrix(path)?;
    if m.ncols() != 1 {
        return Err(format!("{}: expected one value per line, found {} columns", path.display(), m.ncols()).into());
    }
    Ok(m.column(0).into_owned())
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| m[(i, j)].to_string()).collect();
        writeln!(out, "{}", row.join("\t"))?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_vector(path: &Path, v: &DVector<f64>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for x in v.iter() {
        writeln!(out, "{x}")?;
    }
    out.flush()?;
    Ok(())
}
