//! Dense row-major matrices and the handful of products the layers need.
//!
//! Layers mostly need `A · Bᵀ` (inputs against row-stored weights), which is
//! [`gemm`]. All three products share one row-major kernel: [`gemm`] and
//! [`matmul_tn`] transpose an operand first, which is cheap next to the
//! product itself.
//!
//! Output rows are independent, so large products are split across the
//! rayon pool. Each entry is still reduced by the same sequential code, which
//! keeps results bit-identical for any thread count.

use std::fmt;
use std::ops::{Index, IndexMut};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Plain vectors are `Vec<f64>`; functions borrow them as slices.
pub type Vector = Vec<f64>;

/// Work (in multiply-adds) below which a product stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} elements for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input, so it
    /// is meant for literals in tests and examples.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows in Matrix::from_rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row_vector(v: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a 0-column matrix has no data anyway
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn transpose(&self) -> Matrix {
        // square tiles keep both the reads and the strided writes in cache
        const TILE: usize = 16;
        let (r, c) = (self.rows, self.cols);
        let mut t = Matrix::zeros(c, r);
        for i0 in (0..r).step_by(TILE) {
            for j0 in (0..c).step_by(TILE) {
                for i in i0..(i0 + TILE).min(r) {
                    for j in j0..(j0 + TILE).min(c) {
                        t.data[j * r + i] = self.data[i * c + j];
                    }
                }
            }
        }
        t
    }

    /// Copies columns `start..start + width` into a new matrix.
    pub fn col_block(&self, start: usize, width: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, width);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..start + width]);
        }
        out
    }

    /// Writes `block` into columns `start..start + block.cols()`.
    pub fn set_col_block(&mut self, start: usize, block: &Matrix) {
        debug_assert_eq!(block.rows, self.rows);
        for i in 0..self.rows {
            let w = block.cols;
            self.row_mut(i)[start..start + w].copy_from_slice(block.row(i));
        }
    }

    /// Copies rows `start..start + count`.
    pub fn row_block(&self, start: usize, count: usize) -> Matrix {
        Matrix {
            rows: count,
            cols: self.cols,
            data: self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn scaled(&self, k: f64) -> Matrix {
        self.map(|v| v * k)
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// `self += k * other`.
    pub fn add_scaled(&mut self, other: &Matrix, k: f64) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        self.add_scaled(other, 1.0);
    }

    pub fn hadamard(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "hadamard shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Column sums as a vector of length `cols`.
    pub fn col_sums(&self) -> Vector {
        let mut out = vec![0.0; self.cols];
        for r in self.iter_rows() {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        out
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in self.iter_rows().take(8) {
            writeln!(f, "  {r:?}")?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
/// The summation order is fixed, so the result does not depend on threading.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let k = c * 4;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut tail = 0.0;
    for k in chunks * 4..a.len() {
        tail += a[k] * b[k];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn sq_norm(v: &[f64]) -> f64 {
    dot(v, v)
}

/// `‖a − b‖²` by direct subtraction.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `a · bᵀ` where `b_transposed` is given as `n × d` and `a` as `B × d`.
pub fn gemm(a: &Matrix, b_transposed: &Matrix) -> Result<Matrix> {
    if a.cols != b_transposed.cols {
        return Err(Error::shape(
            "gemm",
            format!("inner dimension {}", a.cols),
            format!("{}", b_transposed.cols),
        ));
    }
    Ok(product(a, &b_transposed.transpose()))
}

/// Ordinary product `a · b` (`B × k` times `k × n`).
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("inner dimension {}", a.cols),
            format!("{}", b.rows),
        ));
    }
    Ok(product(a, b))
}

/// `aᵀ · b` (`k × m` given as `a`, `k × n` given as `b`).
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::shape(
            "matmul_tn",
            format!("shared leading dimension {}", a.rows),
            format!("{}", b.rows),
        ));
    }
    Ok(product(&a.transpose(), b))
}

// Row-major `a · b`. The output is cut into slabs of `ROW_SLAB` rows; within
// a slab, `b` is walked in `K_TILE × N_TILE` tiles small enough to stay in L1
// while every row of the slab uses them. Rows are filled four at a time so
// each loaded entry of `b` feeds four multiply-adds, and the innermost loop
// is a contiguous multiply-add that vectorizes. Entry (i, j) is always
// summed over k in ascending order, whatever the tiling or thread count.
fn product(a: &Matrix, b: &Matrix) -> Matrix {
    let (m, n, k) = (a.rows, b.cols, a.cols);
    let mut out = Matrix::zeros(m, n);
    if n == 0 {
        return out;
    }
    let fill = |(s, slab): (usize, &mut [f64])| {
        let first = s * ROW_SLAB;
        let rows = slab.len() / n;
        for j0 in (0..n).step_by(N_TILE) {
            let j1 = (j0 + N_TILE).min(n);
            for q0 in (0..k).step_by(K_TILE) {
                let q1 = (q0 + K_TILE).min(k);
                let mut r = 0;
                while r + ROW_GROUP <= rows {
                    let (head, rest) = slab[r * n..].split_at_mut(n);
                    let (r1, rest) = rest.split_at_mut(n);
                    let (r2, rest) = rest.split_at_mut(n);
                    let r3 = &mut rest[..n];
                    let (o0, o1, o2, o3) = (&mut head[j0..j1], &mut r1[j0..j1], &mut r2[j0..j1], &mut r3[j0..j1]);
                    let i = first + r;
                    let (a0, a1, a2, a3) = (a.row(i), a.row(i + 1), a.row(i + 2), a.row(i + 3));
                    for q in q0..q1 {
                        let br = &b.row(q)[j0..j1];
                        let (c0, c1, c2, c3) = (a0[q], a1[q], a2[q], a3[q]);
                        for j in 0..br.len() {
                            let bv = br[j];
                            o0[j] += c0 * bv;
                            o1[j] += c1 * bv;
                            o2[j] += c2 * bv;
                            o3[j] += c3 * bv;
                        }
                    }
                    r += ROW_GROUP;
                }
                for r in r..rows {
                    let ar = a.row(first + r);
                    let row = &mut slab[r * n + j0..r * n + j1];
                    for q in q0..q1 {
                        let c = ar[q];
                        for (o, bv) in row.iter_mut().zip(&b.row(q)[j0..j1]) {
                            *o += c * bv;
                        }
                    }
                }
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        out.data.par_chunks_mut(ROW_SLAB * n).enumerate().for_each(fill);
    } else {
        out.data.chunks_mut(ROW_SLAB * n).enumerate().for_each(fill);
    }
    out
}

const ROW_SLAB: usize = 32;
const K_TILE: usize = 64;
const N_TILE: usize = 32;
const ROW_GROUP: usize = 4;

/// Squared Euclidean norm of every row.
pub fn row_sq_norms(m: &Matrix) -> Vector {
    m.iter_rows().map(sq_norm).collect()
}

/// Smallest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.
///
/// Sweeps until the off-diagonal mass falls below `1e-15` of the Frobenius
/// norm, which puts the eigenvalues within about `1e-13` of the spectral
/// radius. Input must be square and symmetric to `1e-12` relative.
pub fn sym_eig_min(m: &Matrix) -> Result<f64> {
    let n = m.rows;
    if m.cols != n {
        return Err(Error::shape(
            "sym_eig_min",
            "square matrix",
            format!("{}x{}", m.rows, m.cols),
        ));
    }
    if n == 0 {
        return Err(Error::shape("sym_eig_min", "non-empty matrix", "0x0"));
    }
    let scale = m.max_abs();
    for i in 0..n {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::shape(
                    "sym_eig_min",
                    "symmetric matrix",
                    format!("asymmetry {:e} at ({i},{j})", (m[(i, j)] - m[(j, i)]).abs()),
                ));
            }
        }
    }

    let mut a = m.clone();
    let total = a.frobenius();
    if total == 0.0 {
        return Ok(0.0);
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * total {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    Ok((0..n).map(|i| a[(i, i)]).fold(f64::INFINITY, f64::min))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn gemm_hand_values() {
        let a = Matrix::from_rows(&[[1.0, 2.0]]);
        let b = Matrix::from_rows(&[[3.0, 4.0]]);
        assert_eq!(gemm(&a, &b).unwrap(), Matrix::from_rows(&[[11.0]]));
    }

    #[test]
    fn gemm_identity_and_zero_are_exact() {
        let mut rng = Rng::new(7);
        let a = rng.gaussian_matrix(2, 2, 1.0);
        // a · Iᵀ = a
        assert_eq!(gemm(&a, &Matrix::identity(2)).unwrap(), a);
        // I · aᵀ = aᵀ, so I · (aᵀ)ᵀ = a
        assert_eq!(gemm(&Matrix::identity(2), &a.transpose()).unwrap(), a);
        let z = Matrix::zeros(3, 2);
        assert_eq!(gemm(&a, &z).unwrap(), Matrix::zeros(2, 3));
    }

    #[test]
    fn gemm_rejects_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 4);
        assert!(matches!(gemm(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = Rng::new(3);
        let a = rng.gaussian_matrix(4, 5, 1.0);
        let b = rng.gaussian_matrix(5, 3, 1.0);
        let ab = matmul(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let naive: f64 = (0..5).map(|k| a[(i, k)] * b[(k, j)]).sum();
                assert!((ab[(i, j)] - naive).abs() < 1e-12);
            }
        }
        let atb = matmul_tn(&a.transpose(), &b).unwrap();
        assert_eq!(atb.shape(), (4, 3));
        for (x, y) in atb.as_slice().iter().zip(ab.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn row_norm_values() {
        assert_eq!(row_sq_norms(&Matrix::from_rows(&[[3.0, 4.0]])), vec![25.0]);
        assert_eq!(row_sq_norms(&Matrix::zeros(1, 3)), vec![0.0]);
        assert_eq!(row_sq_norms(&Matrix::from_rows(&[[0.0, 1.0, 0.0]])), vec![1.0]);
    }

    #[test]
    fn row_norms_match_gemm_diagonal() {
        let mut rng = Rng::new(11);
        let m = rng.gaussian_matrix(9, 13, 2.0);
        let g = gemm(&m, &m).unwrap();
        for (i, n) in row_sq_norms(&m).iter().enumerate() {
            assert!((n - g[(i, i)]).abs() <= 1e-12 * n.abs());
        }
    }

    #[test]
    fn eig_min_small_cases() {
        assert!((sym_eig_min(&Matrix::identity(3)).unwrap() - 1.0).abs() < 1e-14);
        let d = Matrix::from_rows(&[[1.0, 0.0], [0.0, -2.0]]);
        assert!((sym_eig_min(&d).unwrap() + 2.0).abs() < 1e-14);
        // [[2,1],[1,2]] has eigenvalues 1 and 3
        let m = Matrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]);
        assert!((sym_eig_min(&m).unwrap() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn eig_min_rejects_bad_input() {
        assert!(sym_eig_min(&Matrix::zeros(2, 3)).is_err());
        let m = Matrix::from_rows(&[[1.0, 2.0], [0.0, 1.0]]);
        assert!(sym_eig_min(&m).is_err());
    }

    #[test]
    fn eig_min_of_squared_matrix_is_nonnegative() {
        for seed in 0..100 {
            let mut rng = Rng::new(seed);
            let a = rng.gaussian_matrix(5, 5, 1.0);
            // AᵀA = gemm(aᵀ, aᵀ)
            let at = a.transpose();
            let g = gemm(&at, &at).unwrap();
            let radius = g.frobenius();
            assert!(sym_eig_min(&g).unwrap() >= -1e-10 * radius, "seed {seed}");
        }
    }

    #[test]
    fn eig_min_matches_rank_one_construction() {
        // v vᵀ + 0.5 I has eigenvalues 0.5 (multiplicity n-1) and ‖v‖² + 0.5
        let v = [1.0, -2.0, 0.5, 3.0];
        let mut m = Matrix::identity(4).scaled(0.5);
        for i in 0..4 {
            for j in 0..4 {
                m[(i, j)] += v[i] * v[j];
            }
        }
        assert!((sym_eig_min(&m).unwrap() - 0.5).abs() < 1e-12);
    }
}
