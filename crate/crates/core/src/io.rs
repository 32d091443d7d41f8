//! Plain-text storage for matrices, weight stacks and datasets.
//!
//! A matrix file has one row per line with comma-separated entries written
//! with 17 significant digits, so a write/read round trip is exact. A weight
//! stack is a directory holding `layer_1.txt` ... `layer_H.txt` plus
//! `dims.txt` with the comma-separated widths `d_0, ..., d_H`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{Dataset, NetworkDims, WeightStack};

pub const DIMS_FILE: &str = "dims.txt";
pub const X_FILE: &str = "X.txt";
pub const Y_FILE: &str = "Y.txt";

pub fn layer_file(layer: usize) -> String {
    format!("layer_{}.txt", layer + 1)
}

pub fn format_matrix(m: &Matrix) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Parses the matrix text format. Blank lines are ignored; every row must
/// have the same number of fields.
pub fn parse_matrix(text: &str) -> Result<Matrix> {
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut count = 0;
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad number {field:?}", n + 1)))?;
            values.push(v);
            count += 1;
        }
        match cols {
            None => cols = Some(count),
            Some(c) if c != count => {
                return Err(Error::Parse(format!(
                    "line {}: expected {c} fields, found {count}",
                    n + 1
                )))
            }
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::Parse("empty matrix".into()))?;
    let m = Matrix::from_row_slice(rows, cols, &values);
    crate::linalg::ensure_finite(&m)?;
    Ok(m)
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    fs::write(path, format_matrix(m))?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_matrix(&text).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_dims(path: &Path, dims: &NetworkDims) -> Result<()> {
    fs::write(path, format!("{dims}\n"))?;
    Ok(())
}

pub fn read_dims(path: &Path) -> Result<NetworkDims> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    NetworkDims::parse(text.trim())
}

pub fn save_weights(dir: &Path, w: &WeightStack) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_dims(&dir.join(DIMS_FILE), &w.dims())?;
    for (l, m) in w.layers().iter().enumerate() {
        write_matrix(&dir.join(layer_file(l)), m)?;
    }
    Ok(())
}

/// Loads a weight stack and checks it against its dims manifest.
pub fn load_weights(dir: &Path) -> Result<WeightStack> {
    let dims = read_dims(&dir.join(DIMS_FILE))?;
    let layers = (0..dims.depth())
        .map(|l| read_matrix(&dir.join(layer_file(l))))
        .collect::<Result<Vec<_>>>()?;
    let w = WeightStack::new(layers)?;
    if w.dims() != dims {
        return Err(Error::Dimension {
            context: "load_weights",
            expected: dims.to_string(),
            found: w.dims().to_string(),
        });
    }
    Ok(w)
}

pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_matrix(&dir.join(X_FILE), data.x())?;
    write_matrix(&dir.join(Y_FILE), data.y())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::new(
        read_matrix(&dir.join(X_FILE))?,
        read_matrix(&dir.join(Y_FILE))?,
    )
}
