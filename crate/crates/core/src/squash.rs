//! Algebraic squashing functions for non-negative scores.
//!
//! These avoid exponentials: saturation is polynomial. `softermax` is the
//! competitive (vector) form; `soft_sigmoid` and `soft_tanh` act element-wise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vector;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SquashConfig {
    /// Sharpness exponent `n > 0`.
    pub n_exp: f64,
    /// Additive stabilizer in the softermax denominator, `≥ 0`.
    pub eps: f64,
}

impl Default for SquashConfig {
    fn default() -> Self {
        SquashConfig { n_exp: 1.0, eps: 1e-6 }
    }
}

impl SquashConfig {
    fn check(&self, op: &'static str) -> Result<()> {
        if !(self.n_exp > 0.0) {
            return Err(Error::domain(
                op,
                format!("exponent must be positive, got {}", self.n_exp),
            ));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::domain(op, format!("eps must be non-negative, got {}", self.eps)));
        }
        Ok(())
    }
}

fn check_non_negative(op: &'static str, x: f64) -> Result<()> {
    if x >= 0.0 {
        Ok(())
    } else {
        Err(Error::domain(op, format!("input must be non-negative, got {x}")))
    }
}

/// `out_k = x_kⁿ / (ε + Σᵢ xᵢⁿ)`. An all-zero input maps to all zeros.
pub fn softermax(x: &[f64], cfg: &SquashConfig) -> Result<Vector> {
    cfg.check("softermax")?;
    for &v in x {
        check_non_negative("softermax", v)?;
    }
    let powered: Vec<f64> = x.iter().map(|v| v.powf(cfg.n_exp)).collect();
    let denom = cfg.eps + powered.iter().sum::<f64>();
    if denom == 0.0 {
        return Ok(vec![0.0; x.len()]);
    }
    Ok(powered.into_iter().map(|p| p / denom).collect())
}

/// `σₙ(x) = xⁿ / (1 + xⁿ)`, mapping `[0, ∞)` onto `[0, 1)`.
pub fn soft_sigmoid(x: f64, n: f64) -> Result<f64> {
    check_non_negative("soft_sigmoid", x)?;
    SquashConfig { n_exp: n, eps: 0.0 }.check("soft_sigmoid")?;
    let p = x.powf(n);
    if p.is_infinite() {
        return Ok(1.0);
    }
    Ok(p / (1.0 + p))
}

/// `τₙ(x) = (xⁿ − 1) / (xⁿ + 1)`, mapping `[0, ∞)` onto `[−1, 1)`.
///
/// Computed as `2σₙ(x) − 1` so the identity between the two holds exactly.
pub fn soft_tanh(x: f64, n: f64) -> Result<f64> {
    Ok(2.0 * soft_sigmoid(x, n)? - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sc(n: f64, eps: f64) -> SquashConfig {
        SquashConfig { n_exp: n, eps }
    }

    #[test]
    fn softermax_values() {
        assert_eq!(softermax(&[1.0, 1.0], &sc(1.0, 0.0)).unwrap(), vec![0.5, 0.5]);
        assert_eq!(softermax(&[0.0, 0.0], &sc(1.0, 0.1)).unwrap(), vec![0.0, 0.0]);
        assert_eq!(softermax(&[0.0, 0.0], &sc(1.0, 0.0)).unwrap(), vec![0.0, 0.0]);
        let v = softermax(&[2.0, 1.0], &sc(2.0, 0.0)).unwrap();
        assert!((v[0] - 0.8).abs() < 1e-15 && (v[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_and_tanh_values() {
        assert_eq!(soft_sigmoid(1.0, 1.0).unwrap(), 0.5);
        assert_eq!(soft_sigmoid(0.0, 3.0).unwrap(), 0.0);
        assert!((soft_sigmoid(3.0, 2.0).unwrap() - 0.9).abs() < 1e-15);
        assert_eq!(soft_tanh(1.0, 2.5).unwrap(), 0.0);
        assert_eq!(soft_tanh(0.0, 2.0).unwrap(), -1.0);
        assert!((soft_tanh(3.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(soft_sigmoid(f64::MAX, 2.0).unwrap(), 1.0);
    }

    #[test]
    fn domain_errors() {
        assert!(softermax(&[1.0, -0.5], &sc(1.0, 0.0)).is_err());
        assert!(softermax(&[1.0], &sc(0.0, 0.0)).is_err());
        assert!(softermax(&[1.0], &sc(1.0, -1.0)).is_err());
        assert!(soft_sigmoid(-1.0, 1.0).is_err());
        assert!(soft_tanh(-1e-9, 1.0).is_err());
        assert!(soft_sigmoid(1.0, -2.0).is_err());
    }

    proptest! {
        #[test]
        fn softermax_mass(
            x in proptest::collection::vec(0.0f64..50.0, 1..10),
            n in 0.25f64..4.0,
            eps in 0.0f64..2.0,
        ) {
            let out = softermax(&x, &sc(n, eps)).unwrap();
            let p: f64 = x.iter().map(|v| v.powf(n)).sum();
            let total: f64 = out.iter().sum();
            prop_assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!(total <= 1.0 + 1e-12);
            if p > 0.0 {
                prop_assert!((total - p / (eps + p)).abs() < 1e-12);
            }
        }

        #[test]
        fn tanh_is_rescaled_sigmoid(x in 0.0f64..1e3, n in 0.1f64..6.0) {
            let s = soft_sigmoid(x, n).unwrap();
            prop_assert_eq!(soft_tanh(x, n).unwrap(), 2.0 * s - 1.0);
            prop_assert!((0.0..1.0).contains(&s) || s == 1.0);
        }

        #[test]
        fn sigmoid_is_monotone(a in 0.0f64..100.0, b in 0.0f64..100.0, n in 0.1f64..5.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(soft_sigmoid(lo, n).unwrap() <= soft_sigmoid(hi, n).unwrap());
        }
    }
}
