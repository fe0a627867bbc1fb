//! Differentiable layers with hand-written backward passes.
//!
//! Every layer follows the same protocol: `forward` returns the output and a
//! cache, `backward` consumes that cache and an upstream gradient, adds the
//! parameter gradients into each [`Param::grad`], and returns the gradient
//! with respect to the layer input. Parameters are reached through
//! [`Module`], which visits them in a fixed order; optimizers and checkpoints
//! rely on that order.

mod attention;
mod block;
mod linear;
mod model;
mod nmn;
mod norm;

pub use attention::{Attention, AttentionCache, ScoreKind, ScoreNorm};
pub use block::{AetherBlock, Block, BlockCache, BlockKind, LnInjection, StandardBlock};
pub use linear::{Linear, LinearCache};
pub use model::{Model, ModelCache, ModelConfig, ModelKind};
pub use nmn::{adaptive_scale, NmnCache, NmnDense};
pub use norm::{gelu, gelu_grad, LayerNorm, LayerNormCache};

use crate::linalg::Matrix;
use crate::rng::Rng;

/// ⵟ-attention is [`Attention`] with [`ScoreKind::Yat`] scores.
pub type YatAttention = Attention;

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn gaussian(name: impl Into<String>, rows: usize, cols: usize, sigma: f64, rng: &mut Rng) -> Self {
        Param::new(name, rng.gaussian_matrix(rows, cols, sigma))
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Param::new(name, Matrix::zeros(rows, cols))
    }
}

pub trait Module {
    fn visit_params(&self, f: &mut dyn FnMut(&Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.grad.fill(0.0));
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.len());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |p| names.push(p.name.clone()));
        names
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit_params(&mut |p| ok &= p.value.all_finite());
        ok
    }
}

/// Init scale for a matrix consuming `fan_in` features.
pub fn init_sigma(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Row-wise softmax restricted to the first `limit(i)` entries of row `i`;
/// the rest of the row is set to zero.
pub(crate) fn masked_softmax_rows(scores: &Matrix, limit: impl Fn(usize) -> usize) -> Matrix {
    let mut p = Matrix::zeros(scores.rows(), scores.cols());
    for i in 0..scores.rows() {
        let upto = limit(i);
        let row = &scores.row(i)[..upto];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let out = &mut p.row_mut(i)[..upto];
        let mut z = 0.0;
        for (o, s) in out.iter_mut().zip(row) {
            *o = (s - m).exp();
            z += *o;
        }
        out.iter_mut().for_each(|o| *o /= z);
    }
    p
}
