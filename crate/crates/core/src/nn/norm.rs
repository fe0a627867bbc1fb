use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::{Module, Param};

const LN_EPS: f64 = 1e-5;

/// Exact GeLU, `x · Φ(x)` with the Gaussian CDF written through `erf`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Per-row layer normalization with learnable gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: Param,
    pub shift: Param,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(name: &str, d: usize) -> Self {
        LayerNorm {
            gain: Param::new(format!("{name}.gain"), Matrix::filled(1, d, 1.0)),
            shift: Param::zeros(format!("{name}.shift"), 1, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.value.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, LayerNormCache)> {
        let d = self.dim();
        if x.cols() != d {
            return Err(Error::shape("layer_norm", format!("{d} columns"), x.cols()));
        }
        let mut normalized = Matrix::zeros(x.rows(), d);
        let mut y = Matrix::zeros(x.rows(), d);
        let mut inv_std = Vec::with_capacity(x.rows());
        let gain = self.gain.value.as_slice();
        let shift = self.shift.value.as_slice();
        for i in 0..x.rows() {
            let r = x.row(i);
            let mean = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let n = (r[j] - mean) * is;
                normalized[(i, j)] = n;
                y[(i, j)] = gain[j] * n + shift[j];
            }
        }
        Ok((y, LayerNormCache { normalized, inv_std }))
    }

    pub fn backward(&mut self, cache: &LayerNormCache, upstream: &Matrix) -> Result<Matrix> {
        let d = self.dim();
        if upstream.shape() != cache.normalized.shape() {
            return Err(Error::Cache(format!(
                "layer norm {}: upstream {:?} vs cache {:?}",
                self.gain.name,
                upstream.shape(),
                cache.normalized.shape()
            )));
        }
        let mut dx = Matrix::zeros(upstream.rows(), d);
        for i in 0..upstream.rows() {
            let g = upstream.row(i);
            let n = cache.normalized.row(i);
            let mut dn = vec![0.0; d];
            for j in 0..d {
                self.gain.grad[(0, j)] += g[j] * n[j];
                self.shift.grad[(0, j)] += g[j];
                dn[j] = g[j] * self.gain.value[(0, j)];
            }
            let mean_dn = dn.iter().sum::<f64>() / d as f64;
            let mean_dn_n = dn.iter().zip(n).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            let is = cache.inv_std[i];
            for j in 0..d {
                dx[(i, j)] = is * (dn[j] - mean_dn - n[j] * mean_dn_n);
            }
        }
        Ok(dx)
    }
}

impl Module for LayerNorm {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gain);
        f(&self.shift);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gain);
        f(&mut self.shift);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, check_module, rel_err};
    use crate::rng::Rng;

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        // Φ(1) = 0.8413447460685429
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((gelu(-1.0) + 0.158_655_253_931_457_05).abs() < 1e-15);
        let n = central_diff(|x| gelu(x[0]), &[0.7]);
        assert!((gelu_grad(0.7) - n[0]).abs() < 1e-9);
    }

    #[test]
    fn normalized_rows_have_zero_mean_unit_variance() {
        let mut rng = Rng::new(3);
        let ln = LayerNorm::new("ln", 16);
        let x = rng.gaussian_matrix(4, 16, 3.0);
        let (y, _) = ln.forward(&x).unwrap();
        for r in y.iter_rows() {
            let m = r.iter().sum::<f64>() / 16.0;
            let v = r.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(8);
        let mut ln = LayerNorm::new("ln", 6);
        ln.gain.value = rng.gaussian_matrix(1, 6, 1.0);
        ln.shift.value = rng.gaussian_matrix(1, 6, 1.0);
        let x = rng.gaussian_matrix(3, 6, 2.0);
        let r = rng.gaussian_matrix(3, 6, 1.0);
        let loss = |l: &LayerNorm| l.forward(&x).unwrap().0.hadamard(&r).as_slice().iter().sum::<f64>();
        ln.zero_grad();
        let (_, cache) = ln.forward(&x).unwrap();
        let dx = ln.backward(&cache, &r).unwrap();
        assert!(check_module(&mut ln, loss, 100, &mut rng).worst() < 1e-6);
        let nx = central_diff(
            |v| {
                let xm = Matrix::from_vec(3, 6, v.to_vec()).unwrap();
                ln.forward(&xm).unwrap().0.hadamard(&r).as_slice().iter().sum()
            },
            x.as_slice(),
        );
        assert!(rel_err(dx.as_slice(), &nx) < 1e-6);
    }
}
