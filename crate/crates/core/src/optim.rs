//! Softmax cross-entropy and the Adam optimizer.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{Module, Param};

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits`, and its gradient `(softmax − onehot) / B`.
pub fn softmax_xent(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    let (b, c) = logits.shape();
    if targets.len() != b {
        return Err(Error::shape("softmax_xent", format!("{b} targets"), targets.len()));
    }
    let mut grad = Matrix::zeros(b, c);
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(Error::Input(format!("target {t} out of range for {c} classes")));
        }
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let log_z = z.ln() + m;
        loss += log_z - row[t];
        for (g, v) in grad.row_mut(i).iter_mut().zip(row) {
            *g = (v - log_z).exp() / b as f64;
        }
        grad[(i, t)] -= 1.0 / b as f64;
    }
    Ok((loss / b as f64, grad))
}

/// Index of the largest entry in each row.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    m.iter_rows()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
                )
                .0
        })
        .collect()
}

/// Bias-corrected Adam with optional decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter of `module` from its accumulated gradient.
    /// Moment buffers are allocated on the first call and must stay
    /// congruent with the module afterwards.
    pub fn step<M: Module + ?Sized>(&mut self, module: &mut M) -> Result<()> {
        if self.step == 0 && self.first.is_empty() {
            module.visit_params(&mut |p: &Param| {
                self.first.push(Matrix::zeros(p.value.rows(), p.value.cols()));
                self.second.push(Matrix::zeros(p.value.rows(), p.value.cols()));
            });
        }
        let mut idx = 0;
        let mut mismatch = None;
        module.visit_params(&mut |p: &Param| {
            if mismatch.is_none() && (idx >= self.first.len() || self.first[idx].shape() != p.value.shape()) {
                mismatch = Some(p.name.clone());
            }
            idx += 1;
        });
        if let Some(name) = mismatch.or((idx != self.first.len()).then(|| "<count>".to_string())) {
            return Err(Error::shape("adam_step", "moments congruent with parameters", name));
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps, wd) = (self.beta1, self.beta2, self.lr, self.eps, self.weight_decay);
        let mut i = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        module.visit_params_mut(&mut |p: &mut Param| {
            let m = first[i].as_mut_slice();
            let v = second[i].as_mut_slice();
            let g = p.grad.as_slice();
            for (k, w) in p.value.as_mut_slice().iter_mut().enumerate() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
            }
            i += 1;
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, rel_err};
    use crate::nn::Linear;
    use crate::rng::Rng;

    #[test]
    fn uniform_logits_give_log_classes() {
        let (loss, _) = softmax_xent(&Matrix::zeros(3, 10), &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-15);
        assert!((loss - 2.302_585).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_logit_gives_zero_loss() {
        let logits = Matrix::from_rows(&[[1e3, 0.0, 0.0]]);
        let (loss, grad) = softmax_xent(&logits, &[0]).unwrap();
        assert!(loss.abs() < 1e-300);
        assert!(grad.max_abs() < 1e-300);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let logits = Rng::new(1).gaussian_matrix(2, 3, 2.0);
        let t = [2, 0];
        let (_, g) = softmax_xent(&logits, &t).unwrap();
        let n = central_diff(
            |v| {
                softmax_xent(&Matrix::from_vec(2, 3, v.to_vec()).unwrap(), &t)
                    .unwrap()
                    .0
            },
            logits.as_slice(),
        );
        assert!(rel_err(g.as_slice(), &n) < 1e-6);
    }

    #[test]
    fn invalid_targets_error() {
        assert!(matches!(softmax_xent(&Matrix::zeros(1, 3), &[3]), Err(Error::Input(_))));
        assert!(softmax_xent(&Matrix::zeros(2, 3), &[0]).is_err());
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut lin = Linear::new("l", 3, 2, true, &mut Rng::new(0));
        let before = lin.weight.value.clone();
        let mut opt = Adam::new(1e-2);
        for _ in 0..3 {
            opt.step(&mut lin).unwrap();
        }
        assert_eq!(lin.weight.value, before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut lin = Linear::new("l", 3, 2, false, &mut Rng::new(0));
        lin.weight.grad = Rng::new(1).gaussian_matrix(2, 3, 1.0);
        let before = lin.weight.value.clone();
        let mut opt = Adam::new(1e-3);
        opt.step(&mut lin).unwrap();
        for k in 0..6 {
            let delta = lin.weight.value.as_slice()[k] - before.as_slice()[k];
            let g = lin.weight.grad.as_slice()[k];
            let expect = -1e-3 * g / (g.abs() + 1e-8);
            assert!((delta - expect).abs() < 1e-15);
            assert!((delta + 1e-3 * g.signum()).abs() < 1e-3 * 1e-7);
        }
    }

    #[test]
    fn decoupled_weight_decay_shrinks_toward_zero() {
        let mut lin = Linear::new("l", 3, 2, false, &mut Rng::new(0));
        let before = lin.weight.value.clone();
        let mut opt = Adam::new(0.1).with_weight_decay(0.5);
        opt.step(&mut lin).unwrap();
        for (a, b) in lin.weight.value.as_slice().iter().zip(before.as_slice()) {
            assert!((a - 0.95 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut rng = Rng::new(4);
            let mut lin = Linear::new("l", 4, 3, true, &mut rng);
            let mut opt = Adam::new(1e-2);
            for _ in 0..20 {
                lin.weight.grad = rng.gaussian_matrix(3, 4, 1.0);
                opt.step(&mut lin).unwrap();
            }
            lin.weight.value
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn incongruent_module_is_rejected() {
        let mut opt = Adam::new(1e-3);
        opt.step(&mut Linear::new("a", 3, 2, false, &mut Rng::new(0))).unwrap();
        assert!(opt.step(&mut Linear::new("b", 4, 2, false, &mut Rng::new(0))).is_err());
    }
}
