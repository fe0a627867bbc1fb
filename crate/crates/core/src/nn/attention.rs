//! Multi-head self-attention with ⵟ-kernel or scaled dot-product scores.

use crate::error::{Error, Result};
use crate::kernel::{yat_batch, yat_batch_backward, BatchCache, KernelConfig};
use crate::linalg::{gemm, matmul, matmul_tn, Matrix};
use crate::rng::Rng;
use crate::squash::SquashConfig;

use super::{init_sigma, masked_softmax_rows, Module, Param};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScoreKind {
    /// `S_ij = ⵟ(q_i, k_j)`, no temperature.
    Yat(KernelConfig),
    /// `S_ij = ⟨q_i, k_j⟩ / √d_h`.
    ScaledDot,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScoreNorm {
    Softmax,
    /// Requires non-negative scores, so only valid with [`ScoreKind::Yat`].
    Softermax(SquashConfig),
}

/// Projections are stored `out × in`; head `h` owns rows `h·d_h .. (h+1)·d_h`
/// of `wq`, `wk` and `wv`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: Param,
    pub wk: Param,
    pub wv: Param,
    pub wo: Param,
    pub heads: usize,
    pub score: ScoreKind,
    pub norm: ScoreNorm,
    pub causal: bool,
}

#[derive(Clone, Debug)]
struct HeadCache {
    scores: Matrix,
    probs: Matrix,
    kernel: Option<BatchCache>,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    x: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    concat: Matrix,
    heads: Vec<HeadCache>,
}

impl AttentionCache {
    /// Row-normalized attention weights of head `h` (`L × L`).
    pub fn weights(&self, h: usize) -> &Matrix {
        &self.heads[h].probs
    }

    /// Raw scores of head `h` before masking and normalization.
    pub fn scores(&self, h: usize) -> &Matrix {
        &self.heads[h].scores
    }
}

impl Attention {
    pub fn new(
        name: &str,
        d: usize,
        heads: usize,
        score: ScoreKind,
        norm: ScoreNorm,
        causal: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", format!("d divisible by {heads} heads"), d));
        }
        if matches!((score, norm), (ScoreKind::ScaledDot, ScoreNorm::Softermax(_))) {
            return Err(Error::Input("softermax needs non-negative scores; use ⵟ scores".into()));
        }
        let sigma = init_sigma(d);
        let mut p = |suffix: &str| Param::gaussian(format!("{name}.{suffix}"), d, d, sigma, rng);
        Ok(Attention {
            wq: p("wq"),
            wk: p("wk"),
            wv: p("wv"),
            wo: p("wo"),
            heads,
            score,
            norm,
            causal,
        })
    }

    pub fn d_model(&self) -> usize {
        self.wq.value.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model() / self.heads
    }

    fn visible(&self, len: usize) -> impl Fn(usize) -> usize {
        let causal = self.causal;
        move |i| if causal { i + 1 } else { len }
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, AttentionCache)> {
        let d = self.d_model();
        if x.cols() != d {
            return Err(Error::shape("attention_forward", format!("{d} columns"), x.cols()));
        }
        let len = x.rows();
        let dh = self.head_dim();
        let q = gemm(x, &self.wq.value)?;
        let k = gemm(x, &self.wk.value)?;
        let v = gemm(x, &self.wv.value)?;
        let mut concat = Matrix::zeros(len, d);
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = (
                q.col_block(h * dh, dh),
                k.col_block(h * dh, dh),
                v.col_block(h * dh, dh),
            );
            let (scores, kernel) = match &self.score {
                ScoreKind::Yat(cfg) => {
                    let (s, c) = yat_batch(&qh, &kh, None, cfg)?;
                    (s, Some(c))
                }
                ScoreKind::ScaledDot => (gemm(&qh, &kh)?.scaled(1.0 / (dh as f64).sqrt()), None),
            };
            let probs = self.normalize(&scores)?;
            concat.set_col_block(h * dh, &matmul(&probs, &vh)?);
            heads.push(HeadCache { scores, probs, kernel });
        }
        let out = gemm(&concat, &self.wo.value)?;
        Ok((
            out,
            AttentionCache {
                x: x.clone(),
                q,
                k,
                v,
                concat,
                heads,
            },
        ))
    }

    fn normalize(&self, scores: &Matrix) -> Result<Matrix> {
        let visible = self.visible(scores.cols());
        match &self.norm {
            ScoreNorm::Softmax => Ok(masked_softmax_rows(scores, visible)),
            ScoreNorm::Softermax(cfg) => {
                let mut p = Matrix::zeros(scores.rows(), scores.cols());
                for i in 0..scores.rows() {
                    let upto = visible(i);
                    let row = crate::squash::softermax(&scores.row(i)[..upto], cfg)?;
                    p.row_mut(i)[..upto].copy_from_slice(&row);
                }
                Ok(p)
            }
        }
    }

    /// Gradient of the loss with respect to the raw scores, given its
    /// gradient with respect to the normalized weights.
    fn normalize_backward(&self, cache: &HeadCache, d_probs: &Matrix) -> Matrix {
        let (rows, cols) = d_probs.shape();
        let visible = self.visible(cols);
        let mut ds = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let upto = visible(i);
            let p = &cache.probs.row(i)[..upto];
            let g = &d_probs.row(i)[..upto];
            match &self.norm {
                ScoreNorm::Softmax => {
                    let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                    for j in 0..upto {
                        ds[(i, j)] = p[j] * (g[j] - inner);
                    }
                }
                ScoreNorm::Softermax(cfg) => {
                    // p_j = a_j / Z with a_j = s_jⁿ and Z = ε + Σ a
                    let n = cfg.n_exp;
                    let s = &cache.scores.row(i)[..upto];
                    let z = cfg.eps + s.iter().map(|v| v.powf(n)).sum::<f64>();
                    if z == 0.0 {
                        continue;
                    }
                    let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                    for j in 0..upto {
                        let da = (g[j] - inner) / z;
                        let dads = if s[j] > 0.0 {
                            n * s[j].powf(n - 1.0)
                        } else if n == 1.0 {
                            1.0
                        } else {
                            0.0
                        };
                        ds[(i, j)] = da * dads;
                    }
                }
            }
        }
        ds
    }

    pub fn backward(&mut self, cache: &AttentionCache, upstream: &Matrix) -> Result<Matrix> {
        let d = self.d_model();
        if upstream.shape() != cache.x.shape() || cache.x.cols() != d || cache.heads.len() != self.heads {
            return Err(Error::Cache(format!(
                "attention {}: upstream {:?}, cached input {:?}, {} cached heads",
                self.wq.name,
                upstream.shape(),
                cache.x.shape(),
                cache.heads.len()
            )));
        }
        let dh = self.head_dim();
        let len = cache.x.rows();
        self.wo.grad.add_assign(&matmul_tn(upstream, &cache.concat)?);
        let d_concat = matmul(upstream, &self.wo.value)?;

        let mut dq = Matrix::zeros(len, d);
        let mut dk = Matrix::zeros(len, d);
        let mut dv = Matrix::zeros(len, d);
        for (h, hc) in cache.heads.iter().enumerate() {
            let off = h * dh;
            let (qh, kh, vh) = (
                cache.q.col_block(off, dh),
                cache.k.col_block(off, dh),
                cache.v.col_block(off, dh),
            );
            let d_out = d_concat.col_block(off, dh);
            let d_probs = gemm(&d_out, &vh)?;
            dv.set_col_block(off, &matmul_tn(&hc.probs, &d_out)?);
            let d_scores = self.normalize_backward(hc, &d_probs);
            let (gq, gk) = match &hc.kernel {
                Some(kc) => {
                    let g = yat_batch_backward(&d_scores, kc, &qh, &kh)?;
                    (g.x, g.w)
                }
                None => {
                    let t = 1.0 / (dh as f64).sqrt();
                    (matmul(&d_scores, &kh)?.scaled(t), matmul_tn(&d_scores, &qh)?.scaled(t))
                }
            };
            dq.set_col_block(off, &gq);
            dk.set_col_block(off, &gk);
        }

        self.wq.grad.add_assign(&matmul_tn(&dq, &cache.x)?);
        self.wk.grad.add_assign(&matmul_tn(&dk, &cache.x)?);
        self.wv.grad.add_assign(&matmul_tn(&dv, &cache.x)?);
        let mut dx = matmul(&dq, &self.wq.value)?;
        dx.add_assign(&matmul(&dk, &self.wk.value)?);
        dx.add_assign(&matmul(&dv, &self.wv.value)?);
        Ok(dx)
    }
}

impl Module for Attention {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.wq);
        f(&self.wk);
        f(&self.wv);
        f(&self.wo);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.wq);
        f(&mut self.wk);
        f(&mut self.wv);
        f(&mut self.wo);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, check_module, rel_err};
    use crate::kernel::yat;
    use crate::linalg::dot;

    fn yat_attn(d: usize, heads: usize, causal: bool, seed: u64) -> Attention {
        let mut rng = Rng::new(seed);
        Attention::new(
            "a",
            d,
            heads,
            ScoreKind::Yat(KernelConfig::fixed(0.1)),
            ScoreNorm::Softmax,
            causal,
            &mut rng,
        )
        .unwrap()
    }

    fn weighted_sum(a: &Attention, x: &Matrix, r: &Matrix) -> f64 {
        a.forward(x).unwrap().0.hadamard(r).as_slice().iter().sum()
    }

    #[test]
    fn rejects_bad_configs() {
        let mut rng = Rng::new(0);
        let yat_cfg = ScoreKind::Yat(KernelConfig::default());
        assert!(Attention::new("a", 6, 4, yat_cfg, ScoreNorm::Softmax, true, &mut rng).is_err());
        let soft = ScoreNorm::Softermax(SquashConfig::default());
        assert!(Attention::new("a", 8, 2, ScoreKind::ScaledDot, soft, true, &mut rng).is_err());
        let a = yat_attn(8, 2, true, 0);
        assert!(a.forward(&Matrix::zeros(3, 7)).is_err());
    }

    #[test]
    fn single_token_returns_projected_value() {
        let a = yat_attn(8, 2, true, 1);
        let x = Rng::new(9).gaussian_matrix(1, 8, 1.0);
        let (y, _) = a.forward(&x).unwrap();
        let v = gemm(&x, &a.wv.value).unwrap();
        let expect = gemm(&v, &a.wo.value).unwrap();
        for (p, q) in y.as_slice().iter().zip(expect.as_slice()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_keys_average_the_values() {
        let a = yat_attn(4, 1, false, 2);
        let row = Rng::new(3).gaussian_vec(4, 1.0);
        let x = Matrix::from_rows(&[row.clone(), row.clone(), row]);
        let (_, cache) = a.forward(&x).unwrap();
        for p in cache.weights(0).as_slice() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_reference_loop() {
        let a = yat_attn(4, 2, true, 4);
        let x = Rng::new(5).gaussian_matrix(2, 4, 1.0);
        let (y, _) = a.forward(&x).unwrap();
        let cfg = KernelConfig::fixed(0.1);
        let proj = |w: &Matrix, r: &[f64]| -> Vec<f64> { (0..4).map(|o| dot(w.row(o), r)).collect() };
        let mut concat = vec![vec![0.0; 4]; 2];
        for h in 0..2 {
            for i in 0..2 {
                let q = proj(&a.wq.value, x.row(i));
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        let k = proj(&a.wk.value, x.row(j));
                        yat(&k[2 * h..2 * h + 2], &q[2 * h..2 * h + 2], &cfg).unwrap()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let v = proj(&a.wv.value, x.row(j));
                    for c in 0..2 {
                        concat[i][2 * h + c] += (s - m).exp() / z * v[2 * h + c];
                    }
                }
            }
        }
        for i in 0..2 {
            let o = proj(&a.wo.value, &concat[i]);
            for c in 0..4 {
                assert!((y[(i, c)] - o[c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rows_sum_to_one_and_scores_are_non_negative() {
        let a = yat_attn(8, 2, true, 6);
        let x = Rng::new(7).gaussian_matrix(5, 8, 1.0);
        let (_, cache) = a.forward(&x).unwrap();
        for h in 0..2 {
            assert!(cache.scores(h).as_slice().iter().all(|&s| s >= 0.0));
            for (i, r) in cache.weights(h).iter_rows().enumerate() {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(r[i + 1..].iter().all(|&p| p == 0.0));
            }
        }
    }

    #[test]
    fn future_tokens_do_not_affect_the_past() {
        let a = yat_attn(8, 2, true, 8);
        let mut rng = Rng::new(10);
        let x = rng.gaussian_matrix(4, 8, 1.0);
        let mut x2 = x.clone();
        for c in 0..8 {
            x2[(3, c)] += rng.gaussian(1.0);
            x2[(2, c)] += rng.gaussian(1.0);
        }
        let (y, _) = a.forward(&x).unwrap();
        let (y2, _) = a.forward(&x2).unwrap();
        assert_eq!(y.row(0), y2.row(0));
        assert_eq!(y.row(1), y2.row(1));
        assert_ne!(y.row(3), y2.row(3));
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let mut a = yat_attn(8, 2, true, 11);
        let x = Rng::new(12).gaussian_matrix(3, 8, 1.0);
        let (_, cache) = a.forward(&x).unwrap();
        let dx = a.backward(&cache, &Matrix::zeros(3, 8)).unwrap();
        assert_eq!(dx.max_abs(), 0.0);
        a.visit_params(&mut |p| assert_eq!(p.grad.max_abs(), 0.0));
        assert!(a.backward(&cache, &Matrix::zeros(2, 8)).is_err());
    }

    #[test]
    fn masked_positions_get_no_score_gradient() {
        let a = yat_attn(4, 1, true, 13);
        let x = Rng::new(14).gaussian_matrix(3, 4, 1.0);
        let (_, cache) = a.forward(&x).unwrap();
        let ds = a.normalize_backward(&cache.heads[0], &Matrix::filled(3, 3, 1.0));
        for i in 0..3 {
            for j in i + 1..3 {
                assert_eq!(ds[(i, j)], 0.0);
            }
        }
    }

    fn check_all(a: &mut Attention, seed: u64, tol: f64) {
        let mut rng = Rng::new(seed);
        let d = a.d_model();
        let x = rng.gaussian_matrix(3, d, 1.0);
        let r = rng.gaussian_matrix(3, d, 1.0);
        a.zero_grad();
        let (_, cache) = a.forward(&x).unwrap();
        let dx = a.backward(&cache, &r).unwrap();
        let report = check_module(a, |m| weighted_sum(m, &x, &r), 200, &mut rng);
        assert!(report.worst() < tol, "seed {seed}: {report:?}");
        let nx = central_diff(
            |v| weighted_sum(a, &Matrix::from_vec(3, d, v.to_vec()).unwrap(), &r),
            x.as_slice(),
        );
        assert!(rel_err(dx.as_slice(), &nx) < tol, "seed {seed} input");
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            check_all(&mut yat_attn(8, 2, true, 20 + seed), seed, 1e-4);
        }
    }

    #[test]
    fn scaled_dot_and_softermax_gradients() {
        for seed in 0..10 {
            let mut rng = Rng::new(40 + seed);
            let mut a = Attention::new("a", 8, 2, ScoreKind::ScaledDot, ScoreNorm::Softmax, true, &mut rng).unwrap();
            check_all(&mut a, seed, 1e-4);
            let soft = ScoreNorm::Softermax(SquashConfig { n_exp: 2.0, eps: 1e-3 });
            let mut b = Attention::new(
                "b",
                8,
                2,
                ScoreKind::Yat(KernelConfig::fixed(0.1)),
                soft,
                false,
                &mut rng,
            )
            .unwrap();
            check_all(&mut b, seed, 1e-4);
        }
    }
}
