//! Plain numeric CSV with a header row.
//!
//! Values are written with Rust's shortest round-trip formatting, so reading
//! a file back gives the exact same `f64`s.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub fn write_matrix_csv<W: Write>(mut out: W, header: &[String], m: &Matrix) -> Result<()> {
    if header.len() != m.cols() {
        return Err(Error::shape(
            "write_matrix_csv",
            format!("{} column names", m.cols()),
            header.len(),
        ));
    }
    writeln!(out, "{}", header.join(","))?;
    for r in m.iter_rows() {
        let line: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

/// Returns the header and the numeric rows.
pub fn read_matrix_csv<R: BufRead>(input: R) -> Result<(Vec<String>, Matrix)> {
    let mut lines = input.lines();
    let header: Vec<String> = match lines.next() {
        Some(h) => h?.split(',').map(str::to_string).collect(),
        None => return Err(Error::parse(None, "empty csv")),
    };
    let mut data = Vec::new();
    let mut rows = 0;
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::parse(None, format!("line {}: bad number {field:?}", n + 2)))?;
            data.push(v);
        }
        if data.len() - before != header.len() {
            return Err(Error::parse(
                None,
                format!(
                    "line {}: {} fields, header has {}",
                    n + 2,
                    data.len() - before,
                    header.len()
                ),
            ));
        }
        rows += 1;
    }
    Ok((header.clone(), Matrix::from_vec(rows, header.len(), data)?))
}
