//! Class responses of a 2-D model sampled on a regular grid.
//!
//! CSV columns: `x, y, resp_0, …, resp_{C−1}, label`, one row per grid
//! point, `x` varying fastest.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::kernel::{yat, KernelConfig};
use crate::linalg::{dot, Matrix};

use super::csv::{read_matrix_csv, write_matrix_csv};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Points per axis, at least 2.
    pub resolution: usize,
}

impl GridSpec {
    pub fn square(half_width: f64, resolution: usize) -> Self {
        GridSpec {
            x_min: -half_width,
            x_max: half_width,
            y_min: -half_width,
            y_max: half_width,
            resolution,
        }
    }

    pub fn cell(&self) -> (f64, f64) {
        let n = (self.resolution - 1) as f64;
        ((self.x_max - self.x_min) / n, (self.y_max - self.y_min) / n)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryGrid {
    pub spec: GridSpec,
    pub classes: usize,
    /// `resolution² × (2 + classes)`: x, y, then responses.
    pub values: Matrix,
    pub labels: Vec<usize>,
}

/// Per-class ⵟ responses to the rows of `prototypes`.
pub fn yat_responses(prototypes: &Matrix, cfg: KernelConfig) -> impl Fn(&[f64]) -> Vec<f64> + '_ {
    move |p| {
        prototypes
            .iter_rows()
            .map(|w| yat(w, p, &cfg).expect("finite config"))
            .collect()
    }
}

/// Per-class affine responses `Wp + b`.
pub fn linear_responses<'a>(weights: &'a Matrix, bias: &'a [f64]) -> impl Fn(&[f64]) -> Vec<f64> + 'a {
    move |p| weights.iter_rows().zip(bias).map(|(w, b)| dot(w, p) + b).collect()
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) },
        )
        .0
}

pub fn emit_boundary_grid(model: impl Fn(&[f64]) -> Vec<f64>, spec: GridSpec) -> Result<BoundaryGrid> {
    if spec.resolution < 2 || !(spec.x_max > spec.x_min) || !(spec.y_max > spec.y_min) {
        return Err(Error::Input(format!("degenerate grid {spec:?}")));
    }
    let (dx, dy) = spec.cell();
    let n = spec.resolution;
    let mut rows = Vec::with_capacity(n * n);
    let mut labels = Vec::with_capacity(n * n);
    let mut classes = None;
    for j in 0..n {
        let y = spec.y_min + j as f64 * dy;
        for i in 0..n {
            let x = spec.x_min + i as f64 * dx;
            let resp = model(&[x, y]);
            if *classes.get_or_insert(resp.len()) != resp.len() || resp.is_empty() {
                return Err(Error::Input("model returned an inconsistent number of classes".into()));
            }
            labels.push(argmax(&resp));
            let mut row = vec![x, y];
            row.extend(resp);
            rows.push(row);
        }
    }
    Ok(BoundaryGrid {
        spec,
        classes: classes.unwrap_or(0),
        values: Matrix::from_rows(&rows),
        labels,
    })
}

impl BoundaryGrid {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["x".to_string(), "y".to_string()];
        h.extend((0..self.classes).map(|c| format!("resp_{c}")));
        h.push("label".into());
        h
    }

    pub fn label_at(&self, i: usize, j: usize) -> usize {
        self.labels[j * self.spec.resolution + i]
    }

    pub fn point(&self, i: usize, j: usize) -> (f64, f64) {
        let r = self.values.row(j * self.spec.resolution + i);
        (r[0], r[1])
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut m = Matrix::zeros(self.values.rows(), self.values.cols() + 1);
        for (r, l) in self.labels.iter().enumerate() {
            let row = m.row_mut(r);
            row[..self.values.cols()].copy_from_slice(self.values.row(r));
            row[self.values.cols()] = *l as f64;
        }
        write_matrix_csv(out, &self.header(), &m)
    }

    /// Reads a grid written by [`BoundaryGrid::write_csv`].
    pub fn read_csv<R: BufRead>(input: R) -> Result<BoundaryGrid> {
        let (header, m) = read_matrix_csv(input)?;
        if header.len() < 4 || header[0] != "x" || header[1] != "y" || header.last().unwrap() != "label" {
            return Err(Error::parse(None, format!("not a boundary grid header: {header:?}")));
        }
        let classes = header.len() - 3;
        let n = (m.rows() as f64).sqrt().round() as usize;
        if n * n != m.rows() || n < 2 {
            return Err(Error::parse(None, format!("{} rows is not a square grid", m.rows())));
        }
        let last = m.rows() - 1;
        let spec = GridSpec {
            x_min: m[(0, 0)],
            x_max: m[(last, 0)],
            y_min: m[(0, 1)],
            y_max: m[(last, 1)],
            resolution: n,
        };
        let labels = (0..m.rows()).map(|r| m[(r, classes + 2)] as usize).collect();
        Ok(BoundaryGrid {
            spec,
            classes,
            values: m.col_block(0, classes + 2),
            labels,
        })
    }
}
