//! Central finite differences, used as the reference for every analytic
//! gradient in the crate.
//!
//! The step for a coordinate `p` is `h = 1e-6 · max(1, |p|)`. Errors are
//! reported tensor-wise as `max |a − n| / max(max |a|, max |n|)`, which stays
//! meaningful when individual entries are near zero. A tensor whose whole
//! gradient is tiny next to the rest of the module (for example a scale
//! exponent feeding a LayerNorm) is judged against `1e-3` of the module's
//! largest gradient instead, since its finite differences are all roundoff.

use crate::nn::{Module, Param};
use crate::rng::Rng;

pub fn step_for(p: f64) -> f64 {
    1e-6 * p.abs().max(1.0)
}

/// Numerical gradient of `f` at `at`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, at: &[f64]) -> Vec<f64> {
    let mut x = at.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            let h = step_for(orig);
            x[i] = orig + h;
            let fp = f(&x);
            x[i] = orig - h;
            let fm = f(&x);
            x[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Tensor-wise relative error between two gradient vectors.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / scale
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub rel_err: f64,
    /// Largest absolute entry of either gradient.
    pub magnitude: f64,
    pub abs_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

const MODULE_FLOOR: f64 = 1e-3;

impl GradCheckReport {
    fn floor(&self) -> f64 {
        MODULE_FLOOR * self.tensors.iter().fold(0.0f64, |m, t| m.max(t.magnitude))
    }

    /// Error of one tensor with the module-level floor applied.
    pub fn error_of(&self, t: &TensorCheck) -> f64 {
        let scale = t.magnitude.max(self.floor());
        if scale == 0.0 {
            0.0
        } else {
            t.abs_err / scale
        }
    }

    pub fn worst(&self) -> f64 {
        self.tensors.iter().fold(0.0, |m, t| m.max(self.error_of(t)))
    }

    pub fn worst_tensor(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| self.error_of(a).total_cmp(&self.error_of(b)))
    }
}

/// Compares the gradients currently stored in `module`'s parameters with
/// central differences of `loss`.
///
/// The caller runs forward and backward first so that every `Param::grad`
/// holds the analytic gradient. Tensors larger than `max_entries` are
/// checked on a random subset of coordinates drawn from `rng`.
pub fn check_module<M: Module>(
    module: &mut M,
    mut loss: impl FnMut(&M) -> f64,
    max_entries: usize,
    rng: &mut Rng,
) -> GradCheckReport {
    // snapshot (name, analytic grad, coordinates to probe)
    let mut plan: Vec<(String, Vec<f64>, Vec<usize>)> = Vec::new();
    module.visit_params(&mut |p: &Param| {
        let n = p.value.len();
        let coords = if n <= max_entries {
            (0..n).collect()
        } else {
            let mut idx: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut idx);
            idx.truncate(max_entries);
            idx
        };
        plan.push((p.name.clone(), p.grad.as_slice().to_vec(), coords));
    });

    let mut report = GradCheckReport::default();
    for (t, (name, grad, coords)) in plan.into_iter().enumerate() {
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = read_entry(module, t, c);
            let h = step_for(orig);
            write_entry(module, t, c, orig + h);
            let fp = loss(module);
            write_entry(module, t, c, orig - h);
            let fm = loss(module);
            write_entry(module, t, c, orig);
            analytic.push(grad[c]);
            numeric.push((fp - fm) / (2.0 * h));
        }
        report.tensors.push(TensorCheck {
            name,
            checked: coords.len(),
            rel_err: rel_err(&analytic, &numeric),
            magnitude: analytic.iter().chain(&numeric).fold(0.0f64, |m, v| m.max(v.abs())),
            abs_err: analytic
                .iter()
                .zip(&numeric)
                .fold(0.0f64, |m, (a, n)| m.max((a - n).abs())),
        });
    }
    report
}

fn read_entry<M: Module>(m: &mut M, tensor: usize, coord: usize) -> f64 {
    let mut i = 0;
    let mut out = 0.0;
    m.visit_params_mut(&mut |p: &mut Param| {
        if i == tensor {
            out = p.value.as_slice()[coord];
        }
        i += 1;
    });
    out
}

fn write_entry<M: Module>(m: &mut M, tensor: usize, coord: usize, v: f64) {
    let mut i = 0;
    m.visit_params_mut(&mut |p: &mut Param| {
        if i == tensor {
            p.value.as_mut_slice()[coord] = v;
        }
        i += 1;
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_of_cubic() {
        let g = central_diff(|x| x[0].powi(3) + 2.0 * x[1], &[2.0, -1.0]);
        assert!((g[0] - 12.0).abs() < 1e-6);
        assert!((g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn rel_err_is_scale_free() {
        assert_eq!(rel_err(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        let e = rel_err(&[1.0, 1e-9], &[1.0 + 1e-7, 0.0]);
        assert!((e - 1e-7).abs() < 1e-12);
    }
}
