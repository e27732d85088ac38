//! File formats: matrix CSV, grounding-box JSON and binary PGM masks.
//!
//! Matrix CSV: a `rows,cols` header line, then `rows` lines of `cols`
//! comma-separated decimals, `\n` line endings.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grounding::{GroundingBox, PatchGrid};
use crate::numkernel::Matrix;
use crate::scalar::Scalar;

pub fn matrix_to_csv<T: Scalar>(m: &Matrix<T>) -> String {
    let mut s = format!("{},{}\n", m.rows(), m.cols());
    for r in 0..m.rows() {
        for (c, v) in m.row(r).iter().enumerate() {
            if c > 0 {
                s.push(',');
            }
            let _ = write!(s, "{v}");
        }
        s.push('\n');
    }
    s
}

pub fn matrix_from_csv<T: Scalar>(text: &str) -> Result<Matrix<T>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty matrix csv".into()))?;
    let dims: Vec<usize> = header
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| Error::Parse(format!("header `{header}`: {e}")))?;
    let [rows, cols] = dims[..] else {
        return Err(Error::Parse(format!("header `{header}` is not rows,cols")));
    };
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (i, line) in lines.enumerate() {
        seen += 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(Error::Parse(format!(
                "row {i} has {} fields, expected {cols}",
                fields.len()
            )));
        }
        for f in fields {
            let v = f
                .trim()
                .parse::<T>()
                .map_err(|_| Error::Parse(format!("row {i}: `{f}` is not a number")))?;
            data.push(v);
        }
    }
    if seen != rows {
        return Err(Error::Parse(format!("{seen} data rows, header says {rows}")));
    }
    Matrix::new(rows, cols, data)
}

pub fn read_matrix_csv<T: Scalar>(path: &Path) -> Result<Matrix<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    matrix_from_csv(&text)
}

pub fn write_matrix_csv<T: Scalar>(path: &Path, m: &Matrix<T>) -> Result<()> {
    write_file(path, matrix_to_csv(m).as_bytes())
}

/// Parses `[{"x1":…, "y1":…, "x2":…, "y2":…}, …]`.
pub fn boxes_from_json(text: &str) -> Result<Vec<GroundingBox>> {
    serde_json::from_str(text).map_err(|e| Error::Parse(format!("box list: {e}")))
}

pub fn read_boxes_json(path: &Path) -> Result<Vec<GroundingBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    boxes_from_json(&text)
}

/// Binary PGM (P5, maxval 255), pixel = `round(255 * clamp(v, 0, 1))`.
pub fn mask_to_pgm<T: Scalar>(values: &[T], grid: PatchGrid) -> Result<Vec<u8>> {
    if values.len() != grid.len() {
        return Err(Error::Dimension(format!(
            "{} mask values for a {grid} grid",
            values.len()
        )));
    }
    let mut out = format!("P5\n{} {}\n255\n", grid.width, grid.height).into_bytes();
    out.extend(values.iter().map(|v| {
        let x = v.as_f64().clamp(0.0, 1.0);
        (255.0 * x).round() as u8
    }));
    Ok(out)
}

pub fn write_pgm<T: Scalar>(path: &Path, values: &[T], grid: PatchGrid) -> Result<()> {
    write_file(path, &mask_to_pgm(values, grid)?)
}

/// Writes `bytes`, creating missing parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
