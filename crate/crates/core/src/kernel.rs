//! The ⵟ-product kernel
//!
//! ```text
//! ⵟ(w, x) = ⟨w, x⟩² / (‖w − x‖² + ε)
//! ```
//!
//! The numerator rewards alignment, the denominator rewards proximity. The
//! biased variant replaces `⟨w, x⟩` with `⟨w, x⟩ + b`.
//!
//! Scalar functions compute `‖w − x‖²` by direct subtraction. The batched
//! path instead expands it as `‖x‖² + ‖w‖² − 2⟨x, w⟩` so that one GEMM serves
//! both the numerator and the denominator; any negative rounding residue of
//! that expansion is clamped to zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, gemm, matmul, matmul_tn, row_sq_norms, sq_dist, Matrix, Vector};

pub const DEFAULT_EPS: f64 = 1e-6;

/// Lower clamp for automatically chosen ε.
pub const MIN_AUTO_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpsMode {
    /// Use `eps` as given.
    Fixed,
    /// Batched evaluations set `ε = d · σ̂²`, where `σ̂²` is the mean
    /// per-coordinate variance of the input batch. Scalar evaluations and
    /// batches of a single row fall back to `eps`.
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub eps: f64,
    pub mode: EpsMode,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            eps: DEFAULT_EPS,
            mode: EpsMode::Fixed,
        }
    }
}

impl KernelConfig {
    pub fn fixed(eps: f64) -> Self {
        assert!(eps > 0.0, "kernel eps must be positive, got {eps}");
        KernelConfig {
            eps,
            mode: EpsMode::Fixed,
        }
    }

    pub fn auto() -> Self {
        KernelConfig {
            eps: DEFAULT_EPS,
            mode: EpsMode::Auto,
        }
    }

    /// ε to use for a batch of inputs.
    pub fn resolve(&self, x: &Matrix) -> f64 {
        match self.mode {
            EpsMode::Fixed => self.eps,
            EpsMode::Auto if x.rows() < 2 => self.eps,
            EpsMode::Auto => {
                let (b, d) = x.shape();
                let means: Vec<f64> = x.col_sums().into_iter().map(|s| s / b as f64).collect();
                let mut var_sum = 0.0;
                for r in x.iter_rows() {
                    for (v, m) in r.iter().zip(&means) {
                        var_sum += (v - m) * (v - m);
                    }
                }
                let mean_var = var_sum / (b as f64 * d as f64);
                (d as f64 * mean_var).max(MIN_AUTO_EPS)
            }
        }
    }

    fn check(&self, op: &'static str) -> Result<()> {
        if self.eps > 0.0 && self.eps.is_finite() {
            Ok(())
        } else {
            Err(Error::domain(
                op,
                format!("eps must be positive and finite, got {}", self.eps),
            ))
        }
    }
}

/// Intermediate quantities of a single evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairCache {
    /// `⟨w, x⟩ + b`
    pub s: f64,
    /// `‖w − x‖²`, clamped at zero
    pub dsq: f64,
    /// `dsq + ε`
    pub denom: f64,
}

impl PairCache {
    pub fn value(&self) -> f64 {
        self.s * self.s / self.denom
    }
}

fn check_pair(op: &'static str, w: &[f64], x: &[f64]) -> Result<()> {
    if w.len() != x.len() {
        return Err(Error::shape(op, format!("len {}", w.len()), format!("len {}", x.len())));
    }
    Ok(())
}

pub fn pair_cache(w: &[f64], x: &[f64], b: f64, cfg: &KernelConfig) -> Result<PairCache> {
    check_pair("pair_cache", w, x)?;
    cfg.check("pair_cache")?;
    let s = dot(w, x) + b;
    let dsq = sq_dist(w, x).max(0.0);
    Ok(PairCache {
        s,
        dsq,
        denom: dsq + cfg.eps,
    })
}

/// `⟨w, x⟩² / (‖w − x‖² + ε)`.
///
/// ```
/// use yat::kernel::{yat, KernelConfig};
///
/// // the XOR prototype against the input (1, 0)
/// let k = yat(&[1.0, -1.0], &[1.0, 0.0], &KernelConfig::fixed(0.01)).unwrap();
/// assert!((k - 1.0 / 1.01).abs() < 1e-15);
/// ```
pub fn yat(w: &[f64], x: &[f64], cfg: &KernelConfig) -> Result<f64> {
    Ok(pair_cache(w, x, 0.0, cfg)?.value())
}

/// `(⟨w, x⟩ + b)² / (‖w − x‖² + ε)`.
pub fn yat_biased(w: &[f64], x: &[f64], b: f64, cfg: &KernelConfig) -> Result<f64> {
    Ok(pair_cache(w, x, b, cfg)?.value())
}

/// Gradients of `ⵟ(w, x)` with respect to `w` and `x`.
///
/// With `s = ⟨w, x⟩` and `D = ‖w − x‖² + ε`:
/// `∇ₓ = (2s/D)(w − s(x − w)/D)` and `∇_w = (2s/D)(x − s(w − x)/D)`.
pub fn yat_grads(w: &[f64], x: &[f64], cfg: &KernelConfig) -> Result<(Vector, Vector)> {
    let c = pair_cache(w, x, 0.0, cfg)?;
    let lead = 2.0 * c.s / c.denom;
    let ratio = c.s / c.denom;
    let gx = w
        .iter()
        .zip(x)
        .map(|(wi, xi)| lead * (wi - ratio * (xi - wi)))
        .collect();
    let gw = w
        .iter()
        .zip(x)
        .map(|(wi, xi)| lead * (xi - ratio * (wi - xi)))
        .collect();
    Ok((gw, gx))
}

/// What the batched backward pass needs from the forward pass.
#[derive(Clone, Debug)]
pub struct BatchCache {
    /// `⟨xᵢ, wⱼ⟩ + bⱼ`, `B × n`
    pub s: Matrix,
    /// `‖xᵢ − wⱼ‖²` from the norm expansion, clamped at zero
    pub dsq: Matrix,
    /// ε actually used (differs from the config in auto mode)
    pub eps: f64,
    pub has_bias: bool,
}

impl BatchCache {
    pub fn shape(&self) -> (usize, usize) {
        self.s.shape()
    }
}

/// All-pairs kernel between the rows of `x` (`B × d`) and `w` (`n × d`),
/// returning `Y` with `Y[i][j] = (⟨xᵢ, wⱼ⟩ + bⱼ)² / (‖xᵢ − wⱼ‖² + ε)`.
pub fn yat_batch(x: &Matrix, w: &Matrix, bias: Option<&[f64]>, cfg: &KernelConfig) -> Result<(Matrix, BatchCache)> {
    if x.cols() != w.cols() {
        return Err(Error::shape(
            "yat_batch",
            format!("{} input columns", w.cols()),
            x.cols(),
        ));
    }
    if let Some(b) = bias {
        if b.len() != w.rows() {
            return Err(Error::shape("yat_batch", format!("bias of len {}", w.rows()), b.len()));
        }
    }
    cfg.check("yat_batch")?;
    let eps = cfg.resolve(x);

    let mut s = gemm(x, w)?;
    let xn = row_sq_norms(x);
    let wn = row_sq_norms(w);
    let (bsz, n) = s.shape();
    let mut dsq = Matrix::zeros(bsz, n);
    let mut y = Matrix::zeros(bsz, n);
    for i in 0..bsz {
        for j in 0..n {
            let raw = s[(i, j)];
            let d2 = (xn[i] + wn[j] - 2.0 * raw).max(0.0);
            let sv = raw + bias.map_or(0.0, |b| b[j]);
            s[(i, j)] = sv;
            dsq[(i, j)] = d2;
            y[(i, j)] = sv * sv / (d2 + eps);
        }
    }
    Ok((
        y,
        BatchCache {
            s,
            dsq,
            eps,
            has_bias: bias.is_some(),
        },
    ))
}

#[derive(Clone, Debug)]
pub struct BatchGrads {
    pub x: Matrix,
    pub w: Matrix,
    /// Column sums of `∂Y/∂b`; all zeros when the forward pass had no bias.
    pub bias: Vector,
}

/// Backpropagates `upstream = ∂L/∂Y` through [`yat_batch`].
///
/// Writing `Y = s²/D` with `D = ‖x‖² + ‖w‖² − 2⟨x, w⟩ + ε`, the quotient rule
/// gives `∂Y/∂⟨x,w⟩ = 2s/D + 2s²/D²` and `∂Y/∂‖x‖² = ∂Y/∂‖w‖² = −s²/D²`.
/// With `P = G ∘ (2s/D + 2s²/D²)` and `Q = G ∘ 2s²/D²` this is two GEMMs:
/// `∂L/∂X = P·W − rowsum(Q) ∘ X` and `∂L/∂W = Pᵀ·X − colsum(Q) ∘ W`.
pub fn yat_batch_backward(upstream: &Matrix, cache: &BatchCache, x: &Matrix, w: &Matrix) -> Result<BatchGrads> {
    let (bsz, n) = cache.shape();
    if upstream.shape() != (bsz, n) {
        return Err(Error::shape(
            "yat_batch_backward",
            format!("upstream {bsz}x{n}"),
            format!("{}x{}", upstream.rows(), upstream.cols()),
        ));
    }
    if x.rows() != bsz || w.rows() != n || x.cols() != w.cols() {
        return Err(Error::Cache(format!(
            "cache is {bsz}x{n} but inputs are {}x{} and {}x{}",
            x.rows(),
            x.cols(),
            w.rows(),
            w.cols()
        )));
    }

    let mut p = Matrix::zeros(bsz, n);
    let mut q_row = vec![0.0; bsz];
    let mut q_col = vec![0.0; n];
    let mut gb = vec![0.0; n];
    for i in 0..bsz {
        for j in 0..n {
            let g = upstream[(i, j)];
            if g == 0.0 {
                continue;
            }
            let s = cache.s[(i, j)];
            let d = cache.dsq[(i, j)] + cache.eps;
            let lin = 2.0 * s / d;
            let quad = 2.0 * s * s / (d * d);
            p[(i, j)] = g * (lin + quad);
            q_row[i] += g * quad;
            q_col[j] += g * quad;
            gb[j] += g * lin;
        }
    }

    let mut gx = matmul(&p, w)?;
    for (i, q) in q_row.iter().enumerate() {
        let xr = x.row(i);
        for (g, xv) in gx.row_mut(i).iter_mut().zip(xr) {
            *g -= q * xv;
        }
    }
    let mut gw = matmul_tn(&p, x)?;
    for (j, q) in q_col.iter().enumerate() {
        let wr = w.row(j);
        for (g, wv) in gw.row_mut(j).iter_mut().zip(wr) {
            *g -= q * wv;
        }
    }
    if !cache.has_bias {
        gb.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(BatchGrads { x: gx, w: gw, bias: gb })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, rel_err};
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn cfg(eps: f64) -> KernelConfig {
        KernelConfig::fixed(eps)
    }

    #[test]
    fn xor_table_values() {
        let w = [1.0, -1.0];
        let c = cfg(0.01);
        assert_eq!(yat(&w, &[0.0, 0.0], &c).unwrap(), 0.0);
        assert_eq!(yat(&w, &[1.0, 1.0], &c).unwrap(), 0.0);
        assert!((yat(&w, &[1.0, 0.0], &c).unwrap() - 1.0 / 1.01).abs() < 1e-15);
        assert!((yat(&w, &[0.0, 1.0], &c).unwrap() - 1.0 / 5.01).abs() < 1e-15);
        assert!((yat_biased(&w, &[0.0, 1.0], 0.0, &c).unwrap() - 1.0 / 5.01).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_and_self_similarity() {
        assert_eq!(yat(&[1.0, 0.0], &[0.0, 3.0], &cfg(0.5)).unwrap(), 0.0);
        assert_eq!(yat(&[1.0, 0.0], &[1.0, 0.0], &cfg(1.0)).unwrap(), 1.0);
        let w = [0.3, -1.2, 2.0];
        let n2 = dot(&w, &w);
        let v = yat(&w, &w, &cfg(0.25)).unwrap();
        assert!((v - n2 * n2 / 0.25).abs() <= 1e-12 * v);
    }

    #[test]
    fn supremum_is_attained_beyond_the_prototype() {
        // the peak sits at x = (1 + ε/‖w‖²)·w, not at x = w, and exceeds
        // ‖w‖⁴/ε by exactly ‖w‖²
        let w = [0.6, -0.8];
        let eps = 2.0;
        let k = 1.0 + eps;
        let x = [k * w[0], k * w[1]];
        let peak = yat(&w, &x, &cfg(eps)).unwrap();
        assert!((peak - (1.0 / eps + 1.0)).abs() < 1e-14);
        assert!(peak > yat(&w, &w, &cfg(eps)).unwrap());
    }

    #[test]
    fn shape_and_domain_errors() {
        assert!(matches!(yat(&[1.0], &[1.0, 2.0], &cfg(1.0)), Err(Error::Shape { .. })));
        let bad = KernelConfig {
            eps: 0.0,
            mode: EpsMode::Fixed,
        };
        assert!(matches!(yat(&[1.0], &[1.0], &bad), Err(Error::Domain { .. })));
        let x = Matrix::zeros(2, 3);
        let w = Matrix::zeros(4, 2);
        assert!(yat_batch(&x, &w, None, &cfg(1.0)).is_err());
        let w = Matrix::zeros(4, 3);
        assert!(yat_batch(&x, &w, Some(&[0.0; 3]), &cfg(1.0)).is_err());
    }

    #[test]
    fn bias_second_difference_is_imq() {
        // g(b) is a quadratic in b with leading coefficient 1/D, so the
        // second difference equals 2/D for any step
        let mut rng = Rng::new(17);
        for _ in 0..200 {
            let w = rng.gaussian_vec(4, 1.0);
            let x = rng.gaussian_vec(4, 1.0);
            let eps = rng.uniform_range(0.01, 1.0);
            let b = rng.gaussian(1.0);
            let c = cfg(eps);
            let expect = 2.0 / (eps + sq_dist(&w, &x));
            for h in [0.1, 0.5, 1.0] {
                let g = |b: f64| yat_biased(&w, &x, b, &c).unwrap();
                let sd = (g(b + h) - 2.0 * g(b) + g(b - h)) / (h * h);
                assert!((sd - expect).abs() <= 1e-8 * expect, "h={h}: {sd} vs {expect}");
            }
        }
    }

    #[test]
    fn batch_matches_pairwise_loop() {
        let mut rng = Rng::new(1);
        let x = rng.gaussian_matrix(4, 3, 1.0);
        let w = rng.gaussian_matrix(5, 3, 1.0);
        let b = rng.gaussian_vec(5, 0.5);
        let c = cfg(0.1);
        for bias in [None, Some(b.as_slice())] {
            let (y, _) = yat_batch(&x, &w, bias, &c).unwrap();
            for i in 0..4 {
                for j in 0..5 {
                    let bj = bias.map_or(0.0, |b| b[j]);
                    let naive = yat_biased(w.row(j), x.row(i), bj, &c).unwrap();
                    assert!((y[(i, j)] - naive).abs() <= 1e-10 * naive.abs().max(1e-300));
                }
            }
        }
    }

    #[test]
    fn batch_single_pair_and_self_match() {
        let w = Matrix::from_rows(&[[0.5, -2.0, 1.0]]);
        let (y, _) = yat_batch(&w, &w, None, &cfg(1e-3)).unwrap();
        let n2 = row_sq_norms(&w)[0];
        assert!((y[(0, 0)] - n2 * n2 / 1e-3).abs() <= 1e-10 * y[(0, 0)]);
    }

    #[test]
    fn auto_eps_uses_batch_variance() {
        let x = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 2.0]]);
        // column variances (population): 1 and 1 → d·mean = 2
        assert!((KernelConfig::auto().resolve(&x) - 2.0).abs() < 1e-15);
        let flat = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]);
        assert_eq!(KernelConfig::auto().resolve(&flat), MIN_AUTO_EPS);
    }

    #[test]
    fn scalar_grads_vs_finite_differences() {
        let w = [1.0, 0.0];
        let x = [0.5, 0.5];
        let c = cfg(0.1);
        let (gw, gx) = yat_grads(&w, &x, &c).unwrap();
        let nx = central_diff(|x| yat(&w, x, &c).unwrap(), &x);
        let nw = central_diff(|w| yat(w, &x, &c).unwrap(), &w);
        assert!(rel_err(&gx, &nx) < 1e-6);
        assert!(rel_err(&gw, &nw) < 1e-6);
    }

    #[test]
    fn scalar_grads_random_tuples() {
        let mut rng = Rng::new(99);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let d = 1 + rng.below(6);
            let w = rng.gaussian_vec(d, 1.0);
            let x = rng.gaussian_vec(d, 1.0);
            let c = cfg(rng.uniform_range(0.01, 1.0));
            let (gw, gx) = yat_grads(&w, &x, &c).unwrap();
            let nx = central_diff(|x| yat(&w, x, &c).unwrap(), &x);
            let nw = central_diff(|w| yat(w, &x, &c).unwrap(), &w);
            worst = worst.max(rel_err(&gx, &nx)).max(rel_err(&gw, &nw));
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn orthogonal_inputs_have_zero_gradient() {
        let (gw, gx) = yat_grads(&[1.0, 0.0], &[0.0, 2.0], &cfg(0.3)).unwrap();
        assert!(gw.iter().chain(&gx).all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_shrinks_like_inverse_radius() {
        let w = [0.6, 0.3, -0.2];
        let u = [0.0, 0.6, 0.8];
        let c = cfg(0.1);
        let gnorm = |k: f64| {
            let x: Vec<f64> = u.iter().map(|v| v * k).collect();
            let (_, gx) = yat_grads(&w, &x, &c).unwrap();
            gx.iter().map(|v| v * v).sum::<f64>().sqrt()
        };
        let const_fit = gnorm(1e3) * 1e3;
        let at_1e4 = gnorm(1e4);
        assert!(
            at_1e4 <= 1.01 * const_fit / 1e4,
            "{at_1e4} vs C/‖x‖ = {}",
            const_fit / 1e4
        );
    }

    fn batch_loss(x: &Matrix, w: &Matrix, b: &[f64], r: &Matrix, c: &KernelConfig) -> f64 {
        let (y, _) = yat_batch(x, w, Some(b), c).unwrap();
        y.hadamard(r).as_slice().iter().sum()
    }

    #[test]
    fn batch_backward_vs_finite_differences() {
        for seed in 0..10 {
            let mut rng = Rng::new(seed);
            let x = rng.gaussian_matrix(3, 2, 1.0);
            let w = rng.gaussian_matrix(4, 2, 1.0);
            let b = rng.gaussian_vec(4, 0.5);
            let r = rng.gaussian_matrix(3, 4, 1.0);
            let c = cfg(rng.uniform_range(0.05, 1.0));
            let (_, cache) = yat_batch(&x, &w, Some(&b), &c).unwrap();
            let g = yat_batch_backward(&r, &cache, &x, &w).unwrap();

            let nx = central_diff(
                |v| batch_loss(&Matrix::from_vec(3, 2, v.to_vec()).unwrap(), &w, &b, &r, &c),
                x.as_slice(),
            );
            let nw = central_diff(
                |v| batch_loss(&x, &Matrix::from_vec(4, 2, v.to_vec()).unwrap(), &b, &r, &c),
                w.as_slice(),
            );
            let nb = central_diff(|v| batch_loss(&x, &w, v, &r, &c), &b);
            assert!(rel_err(g.x.as_slice(), &nx) < 1e-5, "seed {seed} x");
            assert!(rel_err(g.w.as_slice(), &nw) < 1e-5, "seed {seed} w");
            assert!(rel_err(&g.bias, &nb) < 1e-5, "seed {seed} b");
        }
    }

    #[test]
    fn batch_backward_reduces_to_scalar_grads() {
        let w = [0.4, -1.0, 0.7];
        let x = [1.1, 0.2, -0.3];
        let c = cfg(0.2);
        let xm = Matrix::row_vector(&x);
        let wm = Matrix::row_vector(&w);
        let (_, cache) = yat_batch(&xm, &wm, None, &c).unwrap();
        let up = Matrix::filled(1, 1, 2.5);
        let g = yat_batch_backward(&up, &cache, &xm, &wm).unwrap();
        let (gw, gx) = yat_grads(&w, &x, &c).unwrap();
        for k in 0..3 {
            assert!((g.x[(0, k)] - 2.5 * gx[k]).abs() < 1e-12);
            assert!((g.w[(0, k)] - 2.5 * gw[k]).abs() < 1e-12);
        }
        assert_eq!(g.bias, vec![0.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = Rng::new(4);
        let x = rng.gaussian_matrix(3, 5, 1.0);
        let w = rng.gaussian_matrix(2, 5, 1.0);
        let (_, cache) = yat_batch(&x, &w, Some(&[0.1, 0.2]), &cfg(0.1)).unwrap();
        let g = yat_batch_backward(&Matrix::zeros(3, 2), &cache, &x, &w).unwrap();
        assert_eq!(g.x.max_abs(), 0.0);
        assert_eq!(g.w.max_abs(), 0.0);
        assert!(g.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_mismatched_cache() {
        let x = Matrix::zeros(2, 3);
        let w = Matrix::zeros(4, 3);
        let (_, cache) = yat_batch(&x, &w, None, &cfg(1.0)).unwrap();
        assert!(yat_batch_backward(&Matrix::zeros(2, 3), &cache, &x, &w).is_err());
        assert!(yat_batch_backward(&Matrix::zeros(2, 4), &cache, &w, &x).is_err());
    }

    proptest! {
        #[test]
        fn non_negative_and_symmetric(
            w in proptest::collection::vec(-10.0f64..10.0, 1..8),
            seed in any::<u64>(),
            b in -5.0f64..5.0,
            eps in 1e-4f64..10.0,
        ) {
            let mut rng = Rng::new(seed);
            let x = rng.gaussian_vec(w.len(), 3.0);
            let c = cfg(eps);
            prop_assert!(yat_biased(&w, &x, b, &c).unwrap() >= 0.0);
            let a = yat(&w, &x, &c).unwrap();
            let r = yat(&x, &w, &c).unwrap();
            prop_assert!((a - r).abs() <= 1e-12 * a.abs().max(r.abs()));
        }

        #[test]
        fn bounded_by_exact_supremum(
            w in proptest::collection::vec(-3.0f64..3.0, 1..6),
            seed in any::<u64>(),
            eps in 1e-3f64..5.0,
        ) {
            // sup over x is ‖w‖⁴/ε + ‖w‖², reached at x = (1 + ε/‖w‖²)·w
            let mut rng = Rng::new(seed);
            let x = rng.gaussian_vec(w.len(), 2.0);
            let n2 = dot(&w, &w);
            let v = yat(&w, &x, &cfg(eps)).unwrap();
            prop_assert!(v <= (n2 * n2 / eps + n2) * (1.0 + 1e-12) + 1e-300);
        }
    }
}
