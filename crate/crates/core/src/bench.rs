//! Operation counts and wall-clock timing for the batched kernel against a
//! dense layer followed by GeLU.
//!
//! FLOP counts follow the usual convention: one multiply-add is two FLOPs,
//! and a division, square or comparison is one. `B` is the batch size, `n`
//! the number of units and `d` the input width.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{yat_batch, KernelConfig};
use crate::linalg::{gemm, Matrix};
use crate::nn::gelu;
use crate::rng::Rng;

/// FLOPs for a single unit on a single input of width `d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerNeuronFlops {
    pub d: usize,
    pub linear_relu: u64,
    pub linear_gelu: u64,
    /// `‖w − x‖²` computed directly next to `⟨w, x⟩`.
    pub yat_naive: u64,
    /// `‖w − x‖²` recovered from cached norms and the inner product.
    pub yat_optimized: u64,
}

impl PerNeuronFlops {
    pub fn new(d: usize) -> Self {
        let d64 = d as u64;
        PerNeuronFlops {
            d,
            linear_relu: 2 * d64 + 1,
            linear_gelu: 2 * d64 + 15,
            yat_naive: 5 * d64 + 1,
            yat_optimized: 4 * d64 + 4,
        }
    }

    pub fn optimized_vs_relu(&self) -> f64 {
        self.yat_optimized as f64 / self.linear_relu as f64
    }

    pub fn optimized_vs_gelu(&self) -> f64 {
        self.yat_optimized as f64 / self.linear_gelu as f64
    }

    pub fn naive_vs_relu(&self) -> f64 {
        self.yat_naive as f64 / self.linear_relu as f64
    }
}

/// Whole-layer counts for a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub forward: u64,
    pub backward: u64,
}

/// Dense layer: `2Bnd + Bn` forward, `4Bnd + 2Bn` backward.
pub fn linear_layer_flops(b: usize, n: usize, d: usize) -> LayerFlops {
    let (b, n, d) = (b as u64, n as u64, d as u64);
    LayerFlops {
        forward: 2 * b * n * d + b * n,
        backward: 4 * b * n * d + 2 * b * n,
    }
}

/// Kernel layer: `2Bnd + Bd + nd + 5Bn` forward, `4Bnd + 6Bn + Bd + nd`
/// backward. The extra `Bd + nd` are the squared norms.
pub fn yat_layer_flops(b: usize, n: usize, d: usize) -> LayerFlops {
    let (b, n, d) = (b as u64, n as u64, d as u64);
    LayerFlops {
        forward: 2 * b * n * d + b * d + n * d + 5 * b * n,
        backward: 4 * b * n * d + 6 * b * n + b * d + n * d,
    }
}

/// Bytes allocated and simultaneously live inside one forward call of
/// [`yat_batch`], outputs and cache included: the transposed weights during
/// the inner-product GEMM, then `s`, `dsq`, `Y` and both norm vectors.
pub fn yat_forward_peak_bytes(b: usize, n: usize, d: usize) -> usize {
    8 * (n * d + b * n).max(3 * b * n + b + n)
}

/// Same accounting for GEMM then GeLU, keeping the pre-activation for the
/// backward pass.
pub fn linear_gelu_forward_peak_bytes(b: usize, n: usize, d: usize) -> usize {
    8 * (n * d + b * n).max(2 * b * n)
}

/// `GeLU(x Wᵀ)`.
pub fn linear_gelu_forward(x: &Matrix, w: &Matrix) -> Result<(Matrix, Matrix)> {
    let pre = gemm(x, w)?;
    let out = pre.map(gelu);
    Ok((out, pre))
}

/// Fastest of `repeats` runs of `f`, in seconds.
pub fn time_min(repeats: usize, mut f: impl FnMut()) -> f64 {
    (0..repeats.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Asks glibc to serve every block up to 32 MiB from the heap and to keep
/// freed memory instead of returning it to the system. Without this, output
/// buffers past 128 KiB come from fresh `mmap` pages, so a run pays page
/// faults depending on where the allocator's adaptive threshold currently
/// sits, and shapes either side of it time inconsistently. Returns whether
/// the settings were applied; a no-op on other platforms.
pub fn keep_buffers_on_heap() -> bool {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        const LIMIT: libc::c_int = 32 << 20;
        // SAFETY: mallopt only adjusts allocator tuning parameters.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, LIMIT) == 1 && libc::mallopt(libc::M_TRIM_THRESHOLD, LIMIT) == 1
        }
    }
    #[cfg(not(all(target_os = "linux", target_env = "gnu")))]
    {
        false
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub b: usize,
    pub n: usize,
    pub d: usize,
    pub yat_secs: f64,
    pub linear_gelu_secs: f64,
}

impl Timing {
    /// Kernel time over dense-plus-GeLU time.
    pub fn ratio(&self) -> f64 {
        self.yat_secs / self.linear_gelu_secs
    }
}

fn operands(b: usize, n: usize, d: usize, seed: u64) -> (Matrix, Matrix) {
    let mut rng = Rng::new(seed);
    let x = rng.gaussian_matrix(b, d, 1.0);
    let w = rng.gaussian_matrix(n, d, 1.0 / (d as f64).sqrt());
    (x, w)
}

/// Times both forward passes at matched shapes on the same random inputs.
pub fn time_pair(b: usize, n: usize, d: usize, repeats: usize, seed: u64) -> Result<Timing> {
    if b == 0 || n == 0 || d == 0 {
        return Err(Error::Input(format!(
            "benchmark shape ({b}, {n}, {d}) must be positive"
        )));
    }
    let (x, w) = operands(b, n, d, seed);
    let cfg = KernelConfig::default();
    let yat_secs = time_min(repeats, || {
        std::hint::black_box(yat_batch(&x, &w, None, &cfg).expect("shapes checked"));
    });
    let linear_gelu_secs = time_min(repeats, || {
        std::hint::black_box(linear_gelu_forward(&x, &w).expect("shapes checked"));
    });
    Ok(Timing {
        b,
        n,
        d,
        yat_secs,
        linear_gelu_secs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    B,
    N,
    D,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::B, Axis::N, Axis::D];

    pub fn name(self) -> &'static str {
        match self {
            Axis::B => "B",
            Axis::N => "n",
            Axis::D => "d",
        }
    }

    fn grow(self, (b, n, d): (usize, usize, usize), factor: usize) -> (usize, usize, usize) {
        match self {
            Axis::B => (b * factor, n, d),
            Axis::N => (b, n * factor, d),
            Axis::D => (b, n, d * factor),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub axis: Axis,
    pub factor: usize,
    pub base_secs: f64,
    pub scaled_secs: f64,
}

impl ScalingPoint {
    pub fn ratio(&self) -> f64 {
        self.scaled_secs / self.base_secs
    }

    /// Whether the time grew by `factor` to within `tolerance` relative.
    pub fn linear_within(&self, tolerance: f64) -> bool {
        (self.ratio() / self.factor as f64 - 1.0).abs() <= tolerance
    }
}

/// Grows each of `B`, `n`, `d` by `factor` in turn and compares the
/// [`yat_batch`] time against the base shape. Base and grown shapes are
/// timed alternately for `rounds` rounds and the fastest run of each kept,
/// which damps drift from other load on the machine.
pub fn scaling_sweep(
    base: (usize, usize, usize),
    factor: usize,
    rounds: usize,
    seed: u64,
) -> Result<Vec<ScalingPoint>> {
    if factor < 2 || base.0 == 0 || base.1 == 0 || base.2 == 0 {
        return Err(Error::Input(
            "scaling sweep needs a positive base and factor ≥ 2".into(),
        ));
    }
    let cfg = KernelConfig::default();
    let (bx, bw) = operands(base.0, base.1, base.2, seed);
    Axis::ALL
        .iter()
        .map(|&axis| {
            let (b, n, d) = axis.grow(base, factor);
            let (x, w) = operands(b, n, d, seed);
            let (mut base_secs, mut scaled_secs) = (f64::INFINITY, f64::INFINITY);
            for _ in 0..rounds.max(1) {
                base_secs = base_secs.min(time_min(3, || {
                    std::hint::black_box(yat_batch(&bx, &bw, None, &cfg).expect("shapes checked"));
                }));
                scaled_secs = scaled_secs.min(time_min(1, || {
                    std::hint::black_box(yat_batch(&x, &w, None, &cfg).expect("shapes checked"));
                }));
            }
            Ok(ScalingPoint {
                axis,
                factor,
                base_secs,
                scaled_secs,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_neuron_table_at_768() {
        let t = PerNeuronFlops::new(768);
        assert_eq!(
            (t.linear_relu, t.linear_gelu, t.yat_naive, t.yat_optimized),
            (1537, 1551, 3841, 3076)
        );
        assert!((t.optimized_vs_relu() - 3076.0 / 1537.0).abs() < 1e-15);
        assert!((t.optimized_vs_relu() - 2.0).abs() < 0.01);
        assert!((t.optimized_vs_gelu() - 2.0).abs() < 0.02);
        assert!((t.naive_vs_relu() - 2.5).abs() < 0.01);
    }

    #[test]
    fn per_neuron_ratio_tends_to_two() {
        let mut prev = f64::INFINITY;
        for d in [1, 4, 16, 64, 256, 1024, 1 << 16] {
            let r = PerNeuronFlops::new(d).optimized_vs_relu();
            assert!(r < prev && r > 2.0);
            prev = r;
        }
        assert!(prev - 2.0 < 1e-4);
    }

    #[test]
    fn layer_counts_reduce_to_per_neuron_counts() {
        // B = n = 1: the main term is the per-unit inner product
        let l = linear_layer_flops(1, 1, 10);
        assert_eq!(l.forward, 21);
        let y = yat_layer_flops(1, 1, 10);
        assert_eq!(y.forward, 20 + 10 + 10 + 5);
        // overhead of the kernel over the dense layer shrinks with size
        let small = yat_layer_flops(4, 4, 4).forward as f64 / linear_layer_flops(4, 4, 4).forward as f64;
        let big = yat_layer_flops(64, 64, 64).forward as f64 / linear_layer_flops(64, 64, 64).forward as f64;
        assert!(big < small && big < 1.05);
        assert_eq!(yat_layer_flops(2, 3, 5).backward, 4 * 30 + 36 + 10 + 15);
    }

    #[test]
    fn buffer_accounting() {
        assert_eq!(yat_forward_peak_bytes(2, 3, 100), 8 * 306);
        assert_eq!(yat_forward_peak_bytes(100, 3, 2), 8 * 1003);
        assert_eq!(linear_gelu_forward_peak_bytes(100, 3, 2), 8 * 600);
    }

    #[test]
    fn linear_gelu_matches_elementwise_reference() {
        let mut rng = Rng::new(0);
        let x = rng.gaussian_matrix(3, 4, 1.0);
        let w = rng.gaussian_matrix(2, 4, 1.0);
        let (out, pre) = linear_gelu_forward(&x, &w).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let z: f64 = x.row(i).iter().zip(w.row(j)).map(|(a, b)| a * b).sum();
                assert!((pre[(i, j)] - z).abs() < 1e-12);
                assert_eq!(out[(i, j)], gelu(pre[(i, j)]));
            }
        }
    }

    #[test]
    fn heap_pinning_applies_on_glibc() {
        assert_eq!(
            keep_buffers_on_heap(),
            cfg!(all(target_os = "linux", target_env = "gnu"))
        );
    }

    #[test]
    fn timing_runs_and_rejects_empty_shapes() {
        let t = time_pair(4, 4, 4, 2, 0).unwrap();
        assert!(t.yat_secs > 0.0 && t.linear_gelu_secs > 0.0 && t.ratio().is_finite());
        assert!(time_pair(0, 4, 4, 1, 0).is_err());
        let pts = scaling_sweep((2, 2, 2), 2, 1, 0).unwrap();
        assert_eq!(pts.iter().map(|p| p.axis).collect::<Vec<_>>(), Axis::ALL);
        assert!(scaling_sweep((2, 2, 2), 1, 1, 0).is_err());
    }
}
