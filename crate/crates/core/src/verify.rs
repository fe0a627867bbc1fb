//! Executable checks of the kernel's analytic properties.
//!
//! Each probe returns one or more [`ProbeReport`]s. A report compares a
//! measured number against a bound in one of three directions (at most, at
//! least, within) and its status follows from that comparison alone, so a
//! report read back from disk can be re-judged without rerunning anything.
//!
//! Probes are deterministic in their seed and run single-threaded;
//! [`run_all`] may execute independent probes in parallel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{yat, yat_biased, yat_grads, KernelConfig};
use crate::linalg::{dot, sq_dist, sq_norm, sym_eig_min, Matrix};
use crate::nn::{Module, NmnDense};
use crate::optim::Adam;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `measured ≤ bound + tolerance`
    AtMost,
    /// `measured ≥ bound − tolerance`
    AtLeast,
    /// `|measured − bound| ≤ tolerance`
    Within,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe: String,
    pub status: Status,
    pub measured: f64,
    pub bound: f64,
    pub tolerance: f64,
    pub direction: Direction,
    pub seed: u64,
    pub samples: usize,
    /// Per-grid-point measurements, when the probe sweeps a grid.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub values: Vec<f64>,
}

impl ProbeReport {
    pub fn new(probe: impl Into<String>, measured: f64, bound: f64, tolerance: f64, direction: Direction) -> Self {
        let mut r = ProbeReport {
            probe: probe.into(),
            status: Status::Fail,
            measured,
            bound,
            tolerance,
            direction,
            seed: 0,
            samples: 1,
            values: Vec::new(),
        };
        r.status = if r.margin() >= 0.0 { Status::Pass } else { Status::Fail };
        r
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn samples(mut self, samples: usize) -> Self {
        self.samples = samples;
        self
    }

    pub fn values(mut self, values: Vec<f64>) -> Self {
        self.values = values;
        self
    }

    /// Distance to the failure edge; negative (or NaN) means failure.
    pub fn margin(&self) -> f64 {
        let m = match self.direction {
            Direction::AtMost => self.bound + self.tolerance - self.measured,
            Direction::AtLeast => self.measured - (self.bound - self.tolerance),
            Direction::Within => self.tolerance - (self.measured - self.bound).abs(),
        };
        if m.is_nan() {
            f64::NEG_INFINITY
        } else {
            m
        }
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }

    /// One JSON object, no trailing newline.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Reads line-delimited reports, skipping blank lines.
pub fn parse_reports(text: &str) -> Result<Vec<ProbeReport>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Collapses a family of reports into the one closest to failing, renamed
/// to `probe` and carrying the total sample count.
pub fn worst_of(probe: &str, reports: Vec<ProbeReport>) -> ProbeReport {
    let samples = reports.iter().map(|r| r.samples).sum();
    let values = reports.iter().map(|r| r.measured).collect();
    let worst = reports
        .into_iter()
        .min_by(|a, b| a.margin().total_cmp(&b.margin()))
        .expect("at least one report");
    ProbeReport {
        probe: probe.to_string(),
        samples,
        values,
        ..worst
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub seed: u64,
    /// ε values for the PSD and Lipschitz probes.
    pub eps_grid: Vec<f64>,
    pub psd_points: usize,
    pub psd_dim: usize,
    pub psd_seeds: usize,
    /// Allowed negative eigenvalue as a fraction of the largest diagonal.
    pub psd_tolerance: f64,
    pub lipschitz_samples: usize,
    /// Random `(w, u)` pairs for the radial probes.
    pub directions: usize,
    /// Radii `k` for the self-regulation and gradient-decay probes.
    pub k_grid: Vec<f64>,
    /// Radii over which the gradient-decay slope is fitted.
    pub slope_range: (f64, f64),
    pub dims: Vec<usize>,
    pub dim_samples: usize,
    pub sigma: f64,
    /// ε for the radial, dimension and NTK probes.
    pub eps: f64,
    pub imq_samples: usize,
    pub imq_steps: Vec<f64>,
    pub ntk_units: usize,
    pub ntk_dim: usize,
    pub ntk_seeds: usize,
    pub xor_eps: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            seed: 0,
            eps_grid: vec![0.1, 0.5, 1.0],
            psd_points: 64,
            psd_dim: 8,
            psd_seeds: 100,
            psd_tolerance: 1e-8,
            lipschitz_samples: 10_000,
            directions: 100,
            k_grid: (2..=12).map(|i| 10f64.powf(i as f64 / 2.0)).collect(),
            slope_range: (1e1, 1e4),
            dims: vec![64, 256, 1024],
            dim_samples: 10_000,
            sigma: 1.0,
            eps: 1e-6,
            imq_samples: 200,
            imq_steps: vec![0.1, 0.5, 1.0],
            ntk_units: 512,
            ntk_dim: 32,
            ntk_seeds: 20,
            xor_eps: 0.01,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: &[f64]| !v.is_empty() && v.iter().all(|&x| x > 0.0 && x.is_finite());
        let bad = |msg: &str| Err(Error::domain("probe_config", msg));
        if !positive(&self.eps_grid) || !positive(&self.k_grid) || !positive(&self.imq_steps) {
            return bad("eps, k and step grids must be non-empty and positive");
        }
        if self.dims.is_empty() || self.dims.contains(&0) {
            return bad("dimension grid must be non-empty and positive");
        }
        if self.psd_points < 2 {
            return bad("psd probe needs at least two points");
        }
        let counts = [
            self.psd_dim,
            self.psd_seeds,
            self.lipschitz_samples,
            self.directions,
            self.dim_samples,
            self.imq_samples,
            self.ntk_units,
            self.ntk_seeds,
        ];
        if counts.contains(&0) || self.ntk_dim < 2 {
            return bad("sample counts must be positive and the NTK dimension at least 2");
        }
        if !(self.sigma > 0.0 && self.eps > 0.0 && self.xor_eps > 0.0) {
            return bad("sigma and eps must be positive");
        }
        let (lo, hi) = self.slope_range;
        if !(lo > 0.0 && hi > lo) || self.k_grid.iter().filter(|&&k| k >= lo && k <= hi).count() < 2 {
            return bad("slope range must cover at least two radii of the k grid");
        }
        Ok(())
    }
}

/// Gram matrix `Gᵢⱼ = ⵟ(xᵢ, xⱼ)`, every entry evaluated independently.
pub fn gram(points: &[Vec<f64>], cfg: &KernelConfig) -> Result<Matrix> {
    let n = points.len();
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            g[(i, j)] = yat(&points[i], &points[j], cfg)?;
        }
    }
    Ok(g)
}

/// `max|G − Gᵀ| / max|G|`.
pub fn asymmetry(g: &Matrix) -> f64 {
    let n = g.rows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((g[(i, j)] - g[(j, i)]).abs());
        }
    }
    worst / g.max_abs().max(f64::MIN_POSITIVE)
}

/// Smallest eigenvalue of a Gram matrix on unit-ball points, relative to
/// its largest diagonal entry. Fails when it drops below `−tolerance`.
pub fn psd_probe(n_points: usize, d: usize, eps: f64, seed: u64, tolerance: f64) -> Result<ProbeReport> {
    if n_points < 2 || d == 0 {
        return Err(Error::domain(
            "psd_probe",
            "needs at least two points in positive dimension",
        ));
    }
    let mut rng = Rng::new(seed);
    let points: Vec<_> = (0..n_points).map(|_| rng.unit_ball(d)).collect();
    psd_of_points(&points, eps, tolerance).map(|r| r.seed(seed))
}

fn psd_of_points(points: &[Vec<f64>], eps: f64, tolerance: f64) -> Result<ProbeReport> {
    let g = gram(points, &KernelConfig::fixed(eps))?;
    let max_diag = (0..g.rows()).map(|i| g[(i, i)]).fold(0.0, f64::max);
    let min_eig = sym_eig_min(&g)?;
    let rel = if max_diag > 0.0 { min_eig / max_diag } else { min_eig };
    Ok(ProbeReport::new(format!("psd(eps={eps})"), rel, 0.0, tolerance, Direction::AtLeast).samples(points.len()))
}

/// Symmetry and PSD over `seeds` consecutive seeds from `cfg.seed`.
pub fn psd_sweep(cfg: &ProbeConfig, eps: f64) -> Result<Vec<ProbeReport>> {
    let mut psd = Vec::with_capacity(cfg.psd_seeds);
    let mut sym = Vec::with_capacity(cfg.psd_seeds);
    for s in 0..cfg.psd_seeds as u64 {
        let seed = cfg.seed + s;
        let mut rng = Rng::new(seed);
        let points: Vec<_> = (0..cfg.psd_points).map(|_| rng.unit_ball(cfg.psd_dim)).collect();
        let g = gram(&points, &KernelConfig::fixed(eps))?;
        sym.push(ProbeReport::new("", asymmetry(&g), 0.0, 1e-12, Direction::AtMost).seed(seed));
        psd.push(psd_of_points(&points, eps, cfg.psd_tolerance)?.seed(seed));
    }
    Ok(vec![
        worst_of(&format!("psd_symmetry(eps={eps})"), sym),
        worst_of(&format!("psd(eps={eps})"), psd),
    ])
}

/// `|ⵟ(w, ku) − ‖w‖²cos²θ|` along the k grid, for unit `u`.
pub fn self_regulation_errors(w: &[f64], u: &[f64], ks: &[f64], eps: f64) -> Result<Vec<f64>> {
    let cfg = KernelConfig::fixed(eps);
    let un = sq_norm(u).sqrt();
    let c = dot(w, u) / un;
    let limit = c * c;
    ks.iter()
        .map(|&k| {
            let x: Vec<f64> = u.iter().map(|v| v / un * k).collect();
            Ok((yat(w, &x, &cfg)? - limit).abs())
        })
        .collect()
}

/// Two reports: the error at the largest radius against `1e-3`, and the
/// largest step-to-step increase of the error (zero when monotone). The
/// increase is allowed `1e-15·max(1, limit)` of rounding noise.
pub fn self_regulation_probe(w: &[f64], u: &[f64], ks: &[f64], eps: f64) -> Result<Vec<ProbeReport>> {
    if w.len() != u.len() || ks.is_empty() || sq_norm(u) == 0.0 {
        return Err(Error::domain(
            "self_regulation_probe",
            "need matching non-zero vectors and radii",
        ));
    }
    let errs = self_regulation_errors(w, u, ks, eps)?;
    let limit = dot(w, u).powi(2) / sq_norm(u);
    let rise = errs.windows(2).map(|p| p[1] - p[0]).fold(0.0, f64::max);
    let last = *errs.last().unwrap();
    Ok(vec![
        ProbeReport::new("self_regulation_limit", last, 0.0, 1e-3, Direction::AtMost).samples(ks.len()),
        ProbeReport::new(
            "self_regulation_monotone",
            rise,
            0.0,
            1e-15 * limit.max(1.0),
            Direction::AtMost,
        )
        .samples(ks.len())
        .values(errs),
    ])
}

/// Largest `|ⵟ(w,x) − ⵟ(w,x′)| / ‖x − x′‖` over random unit-ball triples,
/// against `L = 2/ε + 4/ε²`.
pub fn lipschitz_probe(eps: f64, samples: usize, d: usize, seed: u64) -> Result<ProbeReport> {
    let cfg = KernelConfig::fixed(eps);
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let w = rng.unit_ball(d);
        let x = rng.unit_ball(d);
        let y = rng.unit_ball(d);
        let dist = sq_dist(&x, &y).sqrt();
        if dist > 0.0 {
            worst = worst.max((yat(&w, &x, &cfg)? - yat(&w, &y, &cfg)?).abs() / dist);
        }
    }
    let bound = lipschitz_bound(eps);
    Ok(
        ProbeReport::new(format!("lipschitz(eps={eps})"), worst, bound, 0.0, Direction::AtMost)
            .seed(seed)
            .samples(samples),
    )
}

pub fn lipschitz_bound(eps: f64) -> f64 {
    2.0 / eps + 4.0 / (eps * eps)
}

/// `‖∇ₓ ⵟ(w, k·u)‖` for each radius `k`, with `u` normalised.
pub fn gradient_norms(w: &[f64], u: &[f64], radii: &[f64], eps: f64) -> Result<Vec<f64>> {
    let cfg = KernelConfig::fixed(eps);
    let un = sq_norm(u).sqrt();
    radii
        .iter()
        .map(|&k| {
            let x: Vec<f64> = u.iter().map(|v| v / un * k).collect();
            Ok(sq_norm(&yat_grads(w, &x, &cfg)?.1).sqrt())
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = xs.iter().zip(ys).map(|(x, y)| (x.ln(), y.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Three reports: the gradient norm at the largest radius against `1e-4`,
/// the largest increase among radii beyond `10‖w‖`, and the log-log slope
/// over `slope_range` against `−1 ± 0.2`.
pub fn gradient_decay_probe(
    w: &[f64],
    u: &[f64],
    radii: &[f64],
    slope_range: (f64, f64),
    eps: f64,
) -> Result<Vec<ProbeReport>> {
    if w.len() != u.len() || radii.len() < 2 || sq_norm(u) == 0.0 {
        return Err(Error::domain(
            "gradient_decay_probe",
            "need matching non-zero vectors and two radii",
        ));
    }
    let norms = gradient_norms(w, u, radii, eps)?;
    let far = 10.0 * sq_norm(w).sqrt();
    let tail: Vec<f64> = radii
        .iter()
        .zip(&norms)
        .filter(|(k, _)| **k > far)
        .map(|(_, g)| *g)
        .collect();
    let rise = tail.windows(2).map(|p| p[1] - p[0]).fold(0.0, f64::max);
    let (xs, ys): (Vec<f64>, Vec<f64>) = radii
        .iter()
        .zip(&norms)
        .filter(|(k, _)| **k >= slope_range.0 && **k <= slope_range.1)
        .map(|(k, g)| (*k, *g))
        .unzip();
    let slope = if xs.len() >= 2 {
        log_log_slope(&xs, &ys)
    } else {
        f64::NAN
    };
    let n = radii.len();
    Ok(vec![
        ProbeReport::new(
            "gradient_decay_final",
            *norms.last().unwrap(),
            0.0,
            1e-4,
            Direction::AtMost,
        )
        .samples(n),
        ProbeReport::new("gradient_decay_monotone", rise, 0.0, 0.0, Direction::AtMost).samples(n),
        ProbeReport::new("gradient_decay_slope", slope, -1.0, 0.2, Direction::Within)
            .samples(xs.len())
            .values(norms),
    ])
}

/// A prototype in the unit ball and a direction making an angle with it
/// whose sine and cosine both have magnitude at least `0.1`.
pub fn generic_pair(d: usize, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    loop {
        let w = rng.unit_ball(d);
        let u = rng.unit_sphere(d);
        let wn = sq_norm(&w).sqrt();
        if wn < 0.1 {
            continue;
        }
        let c = dot(&w, &u) / wn;
        if c.abs() >= 0.1 && (1.0 - c * c).sqrt() >= 0.1 {
            return (w, u);
        }
    }
}

/// Monte Carlo mean of `ⵟ(w, x)` for `w, x ~ N(0, σ²I_d)`, per dimension.
pub fn dim_means(dims: &[usize], samples: usize, sigma: f64, eps: f64, seed: u64) -> Result<Vec<f64>> {
    let cfg = KernelConfig::fixed(eps);
    dims.iter()
        .map(|&d| {
            let mut rng = Rng::new(seed).fork(d as u64);
            let mut total = 0.0;
            for _ in 0..samples {
                let w = rng.gaussian_vec(d, sigma);
                let x = rng.gaussian_vec(d, sigma);
                total += yat(&w, &x, &cfg)?;
            }
            Ok(total / samples as f64)
        })
        .collect()
}

/// Ratio of the largest to the smallest per-dimension mean, against 3.
pub fn dim_scaling_probe(dims: &[usize], samples: usize, sigma: f64, eps: f64, seed: u64) -> Result<ProbeReport> {
    if dims.is_empty() || samples == 0 {
        return Err(Error::domain("dim_scaling_probe", "need dimensions and samples"));
    }
    let means = dim_means(dims, samples, sigma, eps, seed)?;
    let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(ProbeReport::new("dim_scaling", hi / lo, 3.0, 0.0, Direction::AtMost)
        .seed(seed)
        .samples(samples * dims.len())
        .values(means))
}

/// Worst relative gap between the bias second difference of `ⵟ` and
/// `2 / (‖x − w‖² + ε)` over random `(w, x, ε, b)` and each step `h`.
pub fn imq_probe(samples: usize, steps: &[f64], seed: u64) -> Result<ProbeReport> {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let d = 1 + rng.below(8);
        let w = rng.gaussian_vec(d, 1.0);
        let x = rng.gaussian_vec(d, 1.0);
        let eps = rng.uniform_range(0.01, 1.0);
        let b = rng.gaussian(1.0);
        let cfg = KernelConfig::fixed(eps);
        let expect = 2.0 / (sq_dist(&w, &x) + eps);
        for &h in steps {
            let g = |b: f64| yat_biased(&w, &x, b, &cfg);
            let sd = (g(b + h)? - 2.0 * g(b)? + g(b - h)?) / (h * h);
            worst = worst.max((sd - expect).abs() / expect);
        }
    }
    Ok(
        ProbeReport::new("imq_second_difference", worst, 0.0, 1e-8, Direction::AtMost)
            .seed(seed)
            .samples(samples * steps.len()),
    )
}

/// Random single-layer network `f(x) = m^{-1/2} Σᵢ aᵢ ⵟ(wᵢ, x)` with
/// `aᵢ ~ N(0, 1)` and `wᵢ ~ N(0, I/d)`.
pub struct NtkNet {
    pub a: Vec<f64>,
    pub w: Vec<Vec<f64>>,
    pub cfg: KernelConfig,
}

impl NtkNet {
    pub fn sample(m: usize, d: usize, eps: f64, rng: &mut Rng) -> Self {
        let a = rng.gaussian_vec(m, 1.0);
        let w = (0..m).map(|_| rng.gaussian_vec(d, 1.0 / (d as f64).sqrt())).collect();
        NtkNet {
            a,
            w,
            cfg: KernelConfig::fixed(eps),
        }
    }

    /// `∂f/∂θ` with θ ordered as `(a, w₁, …, w_m)`.
    pub fn param_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = self.a.len();
        let scale = 1.0 / (m as f64).sqrt();
        let mut g = Vec::with_capacity(m * (1 + x.len()));
        for wi in &self.w {
            g.push(scale * yat(wi, x, &self.cfg)?);
        }
        for (ai, wi) in self.a.iter().zip(&self.w) {
            let (gw, _) = yat_grads(wi, x, &self.cfg)?;
            g.extend(gw.iter().map(|v| scale * ai * v));
        }
        Ok(g)
    }

    /// Empirical NTK `⟨∂f/∂θ(x), ∂f/∂θ(x′)⟩`.
    pub fn ntk(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        Ok(dot(&self.param_grad(x)?, &self.param_grad(y)?))
    }

    /// `|K(x, x′)| / √(K(x, x) K(x′, x′))`.
    pub fn normalized(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let gx = self.param_grad(x)?;
        let gy = self.param_grad(y)?;
        Ok(dot(&gx, &gy).abs() / (dot(&gx, &gx) * dot(&gy, &gy)).sqrt())
    }
}

/// Unit vectors `x` and `x′` at `angle` radians from each other.
pub fn pair_at_angle(d: usize, angle: f64, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    let x = rng.unit_sphere(d);
    let mut v = rng.unit_sphere(d);
    let c = dot(&x, &v);
    for (vi, xi) in v.iter_mut().zip(&x) {
        *vi -= c * xi;
    }
    let n = sq_norm(&v).sqrt();
    let y = x
        .iter()
        .zip(&v)
        .map(|(xi, vi)| angle.cos() * xi + angle.sin() * vi / n)
        .collect();
    (x, y)
}

/// Normalised NTK between two unit inputs at `angle` for one random net.
pub fn ntk_angle_ratio(m: usize, d: usize, angle: f64, eps: f64, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let net = NtkNet::sample(m, d, eps, &mut rng);
    let (x, y) = pair_at_angle(d, angle, &mut rng);
    net.normalized(&x, &y)
}

/// Orthogonal-pair NTK relative to the aligned (diagonal) entries, against
/// the threshold `0.2`.
pub fn ntk_orthogonality_probe(m: usize, d: usize, eps: f64, seed: u64) -> Result<ProbeReport> {
    if m == 0 || d < 2 {
        return Err(Error::domain("ntk_orthogonality_probe", "need m ≥ 1 and d ≥ 2"));
    }
    let ratio = ntk_angle_ratio(m, d, std::f64::consts::FRAC_PI_2, eps, seed)?;
    Ok(
        ProbeReport::new("ntk_orthogonality", ratio, NTK_THRESHOLD, 0.0, Direction::AtMost)
            .seed(seed)
            .samples(m),
    )
}

pub const NTK_THRESHOLD: f64 = 0.2;

/// Median of the per-seed orthogonality ratio over `cfg.ntk_seeds` seeds.
pub fn ntk_median_probe(cfg: &ProbeConfig) -> Result<ProbeReport> {
    let mut ratios = (0..cfg.ntk_seeds as u64)
        .map(|s| {
            ntk_angle_ratio(
                cfg.ntk_units,
                cfg.ntk_dim,
                std::f64::consts::FRAC_PI_2,
                cfg.eps,
                cfg.seed + s,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    ratios.sort_by(f64::total_cmp);
    let n = ratios.len();
    let median = if n % 2 == 1 {
        ratios[n / 2]
    } else {
        0.5 * (ratios[n / 2 - 1] + ratios[n / 2])
    };
    Ok(ProbeReport::new(
        "ntk_orthogonality_median",
        median,
        NTK_THRESHOLD,
        0.0,
        Direction::AtMost,
    )
    .seed(cfg.seed)
    .samples(n)
    .values(ratios))
}

/// The four XOR inputs and their classes.
pub const XOR_POINTS: [([f64; 2], usize); 4] = [([0.0, 0.0], 0), ([0.0, 1.0], 1), ([1.0, 0.0], 1), ([1.0, 1.0], 0)];

/// Exact responses of the prototype `(1, −1)` on the XOR inputs.
pub fn xor_table(eps: f64) -> [f64; 4] {
    [0.0, 1.0 / (5.0 + eps), 1.0 / (1.0 + eps), 0.0]
}

#[derive(Clone, Debug, PartialEq)]
pub struct XorTraining {
    /// First step after which the classes were separated, or `None` if
    /// they never were.
    pub separated_at: Option<usize>,
    /// Random starts tried, including the one reported.
    pub starts: usize,
    /// Learned prototype.
    pub weight: [f64; 2],
    /// Adaptive scale multiplying the unit's kernel response.
    pub scale: f64,
    pub responses: [f64; 4],
    /// Midpoint between the largest class-0 and smallest class-1 response.
    pub threshold: f64,
    /// Smallest class-1 response minus largest class-0 response.
    pub margin: f64,
}

fn xor_margin(r: &[f64; 4]) -> (f64, f64) {
    let hi0 = XOR_POINTS
        .iter()
        .zip(r)
        .filter(|(p, _)| p.1 == 0)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let lo1 = XOR_POINTS
        .iter()
        .zip(r)
        .filter(|(p, _)| p.1 == 1)
        .map(|(_, v)| *v)
        .fold(f64::INFINITY, f64::min);
    (lo1 - hi0, 0.5 * (lo1 + hi0))
}

/// Trains one ⵟ unit (no bias) from a random start with Adam on squared
/// error against the 0/1 labels for `max_steps` steps.
pub fn train_xor_unit(eps: f64, seed: u64, max_steps: usize) -> Result<XorTraining> {
    let mut rng = Rng::new(seed);
    let cfg = KernelConfig::fixed(eps);
    let mut unit = NmnDense::with_sigma("xor", 2, 1, false, cfg, 1.0, &mut rng);
    let x = Matrix::from_rows(&XOR_POINTS.map(|p| p.0));
    let targets: Vec<f64> = XOR_POINTS.iter().map(|p| p.1 as f64).collect();
    let mut opt = Adam::new(0.05);
    let responses = |u: &NmnDense| -> Result<[f64; 4]> {
        let (y, _) = u.forward(&x)?;
        Ok([y[(0, 0)], y[(1, 0)], y[(2, 0)], y[(3, 0)]])
    };
    let mut separated_at = None;
    for step in 1..=max_steps {
        unit.zero_grad();
        let (y, cache) = unit.forward(&x)?;
        let mut up = Matrix::zeros(4, 1);
        for i in 0..4 {
            up[(i, 0)] = 2.0 * (y[(i, 0)] - targets[i]) / 4.0;
        }
        unit.backward(&cache, &up)?;
        opt.step(&mut unit)?;
        if separated_at.is_none() && xor_margin(&responses(&unit)?).0 > 0.0 {
            separated_at = Some(step);
        }
    }
    let r = responses(&unit)?;
    let (margin, threshold) = xor_margin(&r);
    Ok(XorTraining {
        separated_at,
        starts: 1,
        weight: [unit.weight.value[(0, 0)], unit.weight.value[(0, 1)]],
        scale: unit.scale(),
        responses: r,
        threshold,
        margin,
    })
}

/// Squared error on a single unit has a symmetric local minimum with the
/// prototype along `(1, 1)`, where both class-1 responses tie and the
/// tie-breaking gradient vanishes. This retries from fresh random starts,
/// each with its own step budget, until one separates.
pub fn fit_xor_unit(eps: f64, seed: u64, max_steps: usize, max_starts: usize) -> Result<XorTraining> {
    let mut last = None;
    for start in 0..max_starts.max(1) {
        let t = train_xor_unit(eps, Rng::new(seed).fork(start as u64).next_u64(), max_steps)?;
        let done = t.margin > 0.0;
        last = Some(XorTraining { starts: start + 1, ..t });
        if done {
            break;
        }
    }
    Ok(last.expect("at least one start"))
}

pub const XOR_MAX_STARTS: usize = 10;

/// Three reports: the exact table for `w = (1, −1)`, its separation at
/// threshold zero, and the margin of a unit trained from scratch.
pub fn xor_certificate(eps: f64, seed: u64) -> Result<Vec<ProbeReport>> {
    let cfg = KernelConfig::fixed(eps);
    let w = [1.0, -1.0];
    let got = XOR_POINTS.map(|p| yat(&w, &p.0, &cfg).unwrap_or(f64::NAN));
    let expect = xor_table(eps);
    let table_err = got.iter().zip(&expect).map(|(g, e)| (g - e).abs()).fold(0.0, f64::max);
    let (analytic_margin, _) = {
        // threshold τ = 0 separates when class 0 is exactly zero and class 1 positive
        let hi0 = got[0].max(got[3]);
        let lo1 = got[1].min(got[2]);
        (if hi0 == 0.0 { lo1 } else { -hi0 }, 0.0)
    };
    let trained = fit_xor_unit(eps, seed, 500, XOR_MAX_STARTS)?;
    Ok(vec![
        ProbeReport::new("xor_table", table_err, 0.0, 0.0, Direction::AtMost)
            .samples(4)
            .values(got.to_vec()),
        ProbeReport::new("xor_zero_threshold", analytic_margin, 0.0, 0.0, Direction::AtLeast).samples(4),
        ProbeReport::new("xor_trained_margin", trained.margin, 0.0, 0.0, Direction::AtLeast)
            .seed(seed)
            .samples(4)
            .values(trained.responses.to_vec()),
    ])
}

type Job<'a> = Box<dyn Fn() -> Result<Vec<ProbeReport>> + Send + Sync + 'a>;

/// Every probe at the settings in `cfg`. Reports come back in a fixed
/// order regardless of how many threads run them.
pub fn run_all(cfg: &ProbeConfig) -> Result<Vec<ProbeReport>> {
    cfg.validate()?;
    let mut jobs: Vec<Job> = Vec::new();
    for &eps in &cfg.eps_grid {
        jobs.push(Box::new(move || psd_sweep(cfg, eps)));
    }
    jobs.push(Box::new(|| {
        let mut rng = Rng::new(cfg.seed).fork(1);
        let mut limit = Vec::new();
        let mut mono = Vec::new();
        for _ in 0..cfg.directions {
            let (w, u) = generic_pair(8, &mut rng);
            let [l, m] = <[ProbeReport; 2]>::try_from(self_regulation_probe(&w, &u, &cfg.k_grid, cfg.eps)?).unwrap();
            limit.push(l);
            mono.push(m);
        }
        // the orthogonal case has limit zero and must be exact at every radius
        let orth = self_regulation_errors(&[1.0, 0.0], &[0.0, 1.0], &cfg.k_grid, cfg.eps)?;
        let orth_max = orth.iter().cloned().fold(0.0, f64::max);
        Ok(vec![
            worst_of("self_regulation_limit", limit),
            worst_of("self_regulation_monotone", mono),
            ProbeReport::new("self_regulation_orthogonal", orth_max, 0.0, 0.0, Direction::AtMost).samples(orth.len()),
        ])
    }));
    for &eps in &cfg.eps_grid {
        jobs.push(Box::new(move || {
            Ok(vec![lipschitz_probe(eps, cfg.lipschitz_samples, 8, cfg.seed)?])
        }));
    }
    jobs.push(Box::new(|| {
        let mut rng = Rng::new(cfg.seed).fork(2);
        let mut parts: [Vec<ProbeReport>; 3] = Default::default();
        for _ in 0..cfg.directions {
            let (w, u) = generic_pair(8, &mut rng);
            for (slot, r) in parts
                .iter_mut()
                .zip(gradient_decay_probe(&w, &u, &cfg.k_grid, cfg.slope_range, cfg.eps)?)
            {
                slot.push(r);
            }
        }
        let [f, m, s] = parts;
        Ok(vec![
            worst_of("gradient_decay_final", f),
            worst_of("gradient_decay_monotone", m),
            worst_of("gradient_decay_slope", s),
        ])
    }));
    jobs.push(Box::new(|| {
        Ok(vec![dim_scaling_probe(
            &cfg.dims,
            cfg.dim_samples,
            cfg.sigma,
            cfg.eps,
            cfg.seed,
        )?])
    }));
    jobs.push(Box::new(|| {
        Ok(vec![imq_probe(cfg.imq_samples, &cfg.imq_steps, cfg.seed)?])
    }));
    jobs.push(Box::new(|| Ok(vec![ntk_median_probe(cfg)?])));
    jobs.push(Box::new(|| xor_certificate(cfg.xor_eps, cfg.seed)));
    let results: Vec<Result<Vec<ProbeReport>>> = jobs.par_iter().map(|j| j()).collect();
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}
