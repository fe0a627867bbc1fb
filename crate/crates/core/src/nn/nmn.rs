//! Neural Matter Network dense layer.
//!
//! Unit `j` responds to input `x` with `(⟨wⱼ, x⟩ + bⱼ)² / (‖wⱼ − x‖² + ε)`.
//! The layer returns one response per unit (not their sum), multiplied by
//! the adaptive scale `s = (n / ln(1 + n))^α` with `α` learnable. There is
//! no activation function: the kernel itself is the non-linearity.

use crate::error::{Error, Result};
use crate::kernel::{yat_batch, yat_batch_backward, BatchCache, KernelConfig};
use crate::linalg::Matrix;
use crate::rng::Rng;

use super::{init_sigma, Module, Param};

/// `(n / ln(1 + n))^α`.
pub fn adaptive_scale(n: usize, alpha: f64) -> f64 {
    scale_base(n).powf(alpha)
}

fn scale_base(n: usize) -> f64 {
    let n = n as f64;
    n / n.ln_1p()
}

#[derive(Clone, Debug)]
pub struct NmnDense {
    /// Prototypes, one row per unit (`n × d`).
    pub weight: Param,
    /// Inner biases `bⱼ` (`1 × n`); `None` fixes them at zero.
    pub bias: Option<Param>,
    /// Scale exponent `α` (`1 × 1`).
    pub alpha: Param,
    pub cfg: KernelConfig,
}

#[derive(Clone, Debug)]
pub struct NmnCache {
    x: Matrix,
    kernel: Matrix,
    batch: BatchCache,
    scale: f64,
}

impl NmnCache {
    /// Unscaled kernel responses from the forward pass.
    pub fn kernel(&self) -> &Matrix {
        &self.kernel
    }
}

impl NmnDense {
    /// Gaussian prototypes with `σ = 1/√d`, zero biases, `α = 1`.
    pub fn new(name: &str, d_in: usize, units: usize, with_bias: bool, cfg: KernelConfig, rng: &mut Rng) -> Self {
        Self::with_sigma(name, d_in, units, with_bias, cfg, init_sigma(d_in), rng)
    }

    pub fn with_sigma(
        name: &str,
        d_in: usize,
        units: usize,
        with_bias: bool,
        cfg: KernelConfig,
        sigma: f64,
        rng: &mut Rng,
    ) -> Self {
        NmnDense {
            weight: Param::gaussian(format!("{name}.weight"), units, d_in, sigma, rng),
            bias: with_bias.then(|| Param::zeros(format!("{name}.bias"), 1, units)),
            alpha: Param::new(format!("{name}.alpha"), Matrix::filled(1, 1, 1.0)),
            cfg,
        }
    }

    pub fn units(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.value[(0, 0)]
    }

    pub fn scale(&self) -> f64 {
        adaptive_scale(self.units(), self.alpha())
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, NmnCache)> {
        if x.cols() != self.d_in() {
            return Err(Error::shape(
                "nmn_forward",
                format!("{} input columns", self.d_in()),
                x.cols(),
            ));
        }
        let bias = self.bias.as_ref().map(|b| b.value.as_slice());
        let (kernel, batch) = yat_batch(x, &self.weight.value, bias, &self.cfg)?;
        let scale = self.scale();
        let y = kernel.scaled(scale);
        Ok((
            y,
            NmnCache {
                x: x.clone(),
                kernel,
                batch,
                scale,
            },
        ))
    }

    pub fn backward(&mut self, cache: &NmnCache, upstream: &Matrix) -> Result<Matrix> {
        if upstream.shape() != cache.kernel.shape() || cache.kernel.cols() != self.units() {
            return Err(Error::Cache(format!(
                "nmn {}: upstream {:?}, cached output {:?}, units {}",
                self.weight.name,
                upstream.shape(),
                cache.kernel.shape(),
                self.units()
            )));
        }
        // ∂s/∂α = s · ln(n / ln(1 + n))
        let dscale: f64 = upstream
            .as_slice()
            .iter()
            .zip(cache.kernel.as_slice())
            .map(|(g, k)| g * k)
            .sum();
        self.alpha.grad[(0, 0)] += dscale * cache.scale * scale_base(self.units()).ln();

        let g_kernel = upstream.scaled(cache.scale);
        let grads = yat_batch_backward(&g_kernel, &cache.batch, &cache.x, &self.weight.value)?;
        self.weight.grad.add_assign(&grads.w);
        if let Some(b) = &mut self.bias {
            for (g, v) in b.grad.as_mut_slice().iter_mut().zip(&grads.bias) {
                *g += v;
            }
        }
        Ok(grads.x)
    }
}

impl Module for NmnDense {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
        f(&self.alpha);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
        f(&mut self.alpha);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, check_module, rel_err};
    use crate::kernel::yat_biased;
    use crate::linalg::sq_norm;

    #[test]
    fn scale_values() {
        assert!((adaptive_scale(1, 1.0) - 1.0 / 2f64.ln()).abs() < 1e-15);
        assert!((adaptive_scale(1, 1.0) - 1.442_695_040_888_963_4).abs() < 1e-15);
        assert_eq!(adaptive_scale(17, 0.0), 1.0);
    }

    #[test]
    fn single_unit_self_similarity_with_unit_scale() {
        let mut rng = Rng::new(0);
        let mut layer = NmnDense::new("n", 3, 1, false, KernelConfig::fixed(1.0), &mut rng);
        layer.alpha.value[(0, 0)] = 0.0;
        let w = layer.weight.value.clone();
        let (y, _) = layer.forward(&w).unwrap();
        let n2 = sq_norm(w.row(0));
        assert!((y[(0, 0)] - n2 * n2).abs() < 1e-12 * n2 * n2);
    }

    #[test]
    fn forward_equals_scaled_pairwise_kernel() {
        let mut rng = Rng::new(5);
        let mut layer = NmnDense::new("n", 4, 6, true, KernelConfig::fixed(0.05), &mut rng);
        layer.bias.as_mut().unwrap().value = rng.gaussian_matrix(1, 6, 0.3);
        layer.alpha.value[(0, 0)] = 1.7;
        let x = rng.gaussian_matrix(5, 4, 1.0);
        let (y, _) = layer.forward(&x).unwrap();
        let s = layer.scale();
        for i in 0..5 {
            for j in 0..6 {
                let b = layer.bias.as_ref().unwrap().value[(0, j)];
                let k = yat_biased(layer.weight.value.row(j), x.row(i), b, &layer.cfg).unwrap();
                assert!((y[(i, j)] - s * k).abs() <= 1e-10 * (s * k).abs().max(1e-300));
            }
        }
    }

    #[test]
    fn shape_and_cache_errors() {
        let mut rng = Rng::new(1);
        let mut layer = NmnDense::new("n", 4, 3, false, KernelConfig::default(), &mut rng);
        assert!(layer.forward(&Matrix::zeros(2, 5)).is_err());
        let (_, cache) = layer.forward(&Matrix::zeros(2, 4)).unwrap();
        assert!(layer.backward(&cache, &Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let mut rng = Rng::new(2);
        let mut layer = NmnDense::new("n", 4, 3, true, KernelConfig::fixed(0.1), &mut rng);
        let x = rng.gaussian_matrix(2, 4, 1.0);
        let (_, cache) = layer.forward(&x).unwrap();
        let gx = layer.backward(&cache, &Matrix::zeros(2, 3)).unwrap();
        assert_eq!(gx.max_abs(), 0.0);
        layer.visit_params(&mut |p| assert_eq!(p.grad.max_abs(), 0.0, "{}", p.name));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut rng = Rng::new(100 + seed);
            let mut layer = NmnDense::new("n", 5, 4, true, KernelConfig::fixed(0.1), &mut rng);
            layer.bias.as_mut().unwrap().value = rng.gaussian_matrix(1, 4, 0.5);
            layer.alpha.value[(0, 0)] = rng.uniform_range(0.5, 2.0);
            let x = rng.gaussian_matrix(3, 5, 1.0);
            let r = rng.gaussian_matrix(3, 4, 1.0);
            let loss = |l: &NmnDense| l.forward(&x).unwrap().0.hadamard(&r).as_slice().iter().sum::<f64>();

            layer.zero_grad();
            let (_, cache) = layer.forward(&x).unwrap();
            let gx = layer.backward(&cache, &r).unwrap();
            let report = check_module(&mut layer, loss, 100, &mut rng);
            assert!(report.worst() < 1e-5, "seed {seed}: {report:?}");

            let nx = central_diff(|v| loss_at_input(&layer, v, &r), x.as_slice());
            assert!(rel_err(gx.as_slice(), &nx) < 1e-5, "seed {seed} input");
        }
    }

    fn loss_at_input(layer: &NmnDense, v: &[f64], r: &Matrix) -> f64 {
        let x = Matrix::from_vec(r.rows(), layer.d_in(), v.to_vec()).unwrap();
        layer.forward(&x).unwrap().0.hadamard(r).as_slice().iter().sum()
    }
}
