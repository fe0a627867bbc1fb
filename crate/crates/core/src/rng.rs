//! Seeded randomness.
//!
//! All sampling goes through [`Rng`], a thin wrapper over ChaCha8. ChaCha's
//! output stream is fully specified, so a seed produces the same numbers on
//! every platform and every run. Gaussians come from `rand_distr`'s ziggurat
//! sampler, which is likewise deterministic given the underlying stream.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::{Matrix, Vector};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent generator for a named sub-task, derived from this seed
    /// without consuming from this stream.
    pub fn fork(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Rng { seed: self.seed, inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn gaussian(&mut self, sigma: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.inner);
        sigma * z
    }

    pub fn gaussian_vec(&mut self, n: usize, sigma: f64) -> Vector {
        (0..n).map(|_| self.gaussian(sigma)).collect()
    }

    /// `rows × cols` matrix of i.i.d. `N(0, sigma²)` entries.
    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, sigma: f64) -> Matrix {
        assert!(sigma >= 0.0, "gaussian sigma must be non-negative");
        let data = (0..rows * cols).map(|_| self.gaussian(sigma)).collect();
        Matrix::from_vec(rows, cols, data).expect("length matches by construction")
    }

    /// Uniform direction on the unit sphere in `d` dimensions.
    pub fn unit_sphere(&mut self, d: usize) -> Vector {
        loop {
            let v = self.gaussian_vec(d, 1.0);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    }

    /// Uniform point in the closed unit ball.
    pub fn unit_ball(&mut self, d: usize) -> Vector {
        let r = self.uniform().powf(1.0 / d as f64);
        self.unit_sphere(d).into_iter().map(|x| x * r).collect()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        // Fisher-Yates with our own `below` so the permutation is pinned to
        // this crate's stream rather than to a rand helper's internals.
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// `rows × cols` matrix of i.i.d. `N(0, sigma²)` draws.
pub fn gaussian_fill(rng: &mut Rng, rows: usize, cols: usize, sigma: f64) -> Matrix {
    assert!(sigma > 0.0, "gaussian_fill requires sigma > 0");
    rng.gaussian_matrix(rows, cols, sigma)
}
