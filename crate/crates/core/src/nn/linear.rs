use crate::error::{Error, Result};
use crate::linalg::{gemm, matmul, matmul_tn, Matrix};
use crate::rng::Rng;

use super::{init_sigma, Module, Param};

/// `y = x·Wᵀ + b` with `W` stored `out × in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

#[derive(Clone, Debug)]
pub struct LinearCache {
    x: Matrix,
}

impl Linear {
    pub fn new(name: &str, d_in: usize, d_out: usize, with_bias: bool, rng: &mut Rng) -> Self {
        Linear {
            weight: Param::gaussian(format!("{name}.weight"), d_out, d_in, init_sigma(d_in), rng),
            bias: with_bias.then(|| Param::zeros(format!("{name}.bias"), 1, d_out)),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, LinearCache)> {
        let mut y = gemm(x, &self.weight.value)?;
        if let Some(b) = &self.bias {
            for i in 0..y.rows() {
                for (v, bj) in y.row_mut(i).iter_mut().zip(b.value.as_slice()) {
                    *v += bj;
                }
            }
        }
        Ok((y, LinearCache { x: x.clone() }))
    }

    pub fn backward(&mut self, cache: &LinearCache, upstream: &Matrix) -> Result<Matrix> {
        if upstream.shape() != (cache.x.rows(), self.d_out()) {
            return Err(Error::Cache(format!(
                "linear {}: upstream {:?} vs batch {} x out {}",
                self.weight.name,
                upstream.shape(),
                cache.x.rows(),
                self.d_out()
            )));
        }
        self.weight.grad.add_assign(&matmul_tn(upstream, &cache.x)?);
        if let Some(b) = &mut self.bias {
            for (g, s) in b.grad.as_mut_slice().iter_mut().zip(upstream.col_sums()) {
                *g += s;
            }
        }
        matmul(upstream, &self.weight.value)
    }
}

impl Module for Linear {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_module;

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(0);
        let mut lin = Linear::new("fc", 5, 3, true, &mut rng);
        lin.bias.as_mut().unwrap().value = rng.gaussian_matrix(1, 3, 1.0);
        let x = rng.gaussian_matrix(4, 5, 1.0);
        let r = rng.gaussian_matrix(4, 3, 1.0);
        let loss = |l: &Linear| l.forward(&x).unwrap().0.hadamard(&r).as_slice().iter().sum::<f64>();
        lin.zero_grad();
        let (_, cache) = lin.forward(&x).unwrap();
        lin.backward(&cache, &r).unwrap();
        let report = check_module(&mut lin, loss, 100, &mut rng);
        assert!(report.worst() < 1e-7, "{report:?}");
    }
}
