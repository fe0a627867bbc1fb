//! Datasets and the text formats written by the experiments.

mod corpus;
mod csv;
mod grid;
mod mnist;

pub use corpus::{char_tokenize, CharCorpus, LmBatcher, SONNETS};
pub use csv::{read_matrix_csv, write_matrix_csv};
pub use grid::{emit_boundary_grid, linear_responses, yat_responses, BoundaryGrid, GridSpec};
pub use mnist::{load_mnist_idx, parse_idx_images, parse_idx_labels, write_idx_images, write_idx_labels, IdxImages};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Labelled feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, classes: usize, split: impl Into<String>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} labels", inputs.rows()),
                labels.len(),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Dataset {
            inputs,
            labels,
            classes,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows at `idx`, in that order.
    pub fn gather(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        let d = self.dim();
        let mut x = Matrix::zeros(idx.len(), d);
        for (r, &i) in idx.iter().enumerate() {
            x.row_mut(r).copy_from_slice(self.inputs.row(i));
        }
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// First `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            inputs: self.inputs.row_block(0, n),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            split: self.split.clone(),
        }
    }
}

/// The four XOR points with labels `0, 1, 1, 0`.
pub fn xor_dataset() -> Dataset {
    let inputs = Matrix::from_rows(&[[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]]);
    Dataset::new(inputs, vec![0, 1, 1, 0], 2, "xor").expect("static dataset")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xor_rows_and_labels() {
        let d = xor_dataset();
        assert_eq!(d.dim(), 2);
        assert_eq!(d.len(), 4);
        assert_eq!(d.labels.iter().sum::<usize>(), 2);
        assert_eq!(d.inputs.row(1), &[0.0, 1.0]);
        assert_eq!(d.labels, vec![0, 1, 1, 0]);
    }

    #[test]
    fn rejects_inconsistent_datasets() {
        assert!(Dataset::new(Matrix::zeros(2, 3), vec![0], 2, "x").is_err());
        assert!(Dataset::new(Matrix::zeros(1, 3), vec![2], 2, "x").is_err());
    }

    #[test]
    fn gather_and_head() {
        let d = xor_dataset();
        let (x, y) = d.gather(&[3, 1]);
        assert_eq!(x.row(0), &[1.0, 1.0]);
        assert_eq!(y, vec![0, 1]);
        assert_eq!(d.head(2).len(), 2);
        assert_eq!(d.head(10).len(), 4);
    }
}
