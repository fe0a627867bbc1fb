use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, ValueEnum};
use serde::Serialize;

use yat::bench::{self, PerNeuronFlops};
use yat::checkpoint;
use yat::data::{
    char_tokenize, emit_boundary_grid, linear_responses, load_mnist_idx, read_matrix_csv, write_matrix_csv,
    yat_responses, Dataset, GridSpec, SONNETS,
};
use yat::kernel::{yat, yat_batch, KernelConfig};
use yat::linalg::Matrix;
use yat::nn::{Model, ModelConfig, ModelKind, Module};
use yat::rng::Rng;
use yat::train::{
    invert_prototypes_eval, lm_overfit_check, train_classifier, train_lm, Classifier, ClassifierConfig, HeadKind,
    LmConfig,
};
use yat::verify::{self, ProbeConfig, ProbeReport};

use crate::{alloc, Common, Failure, Outcome};

fn kernel(common: &Common, default_eps: f64) -> KernelConfig {
    KernelConfig::fixed(common.eps.unwrap_or(default_eps))
}

fn create(path: PathBuf) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn print_report(r: &ProbeReport) {
    let status = if r.passed() { "PASS" } else { "FAIL" };
    println!(
        "{status} {} measured={:e} bound={:e} tolerance={:e}",
        r.probe, r.measured, r.bound, r.tolerance
    );
}

fn write_reports(path: PathBuf, reports: &[ProbeReport]) -> anyhow::Result<()> {
    let mut out = create(path)?;
    for r in reports {
        writeln!(out, "{}", r.to_json_line())?;
    }
    out.flush()?;
    Ok(())
}

fn check_all(what: &str, reports: &[ProbeReport]) -> Outcome {
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.probe.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("{what}: {}", failed.join(", "))))
    }
}

#[derive(Args, Debug, Serialize)]
pub struct VerifyArgs {
    /// Allowed negative Gram eigenvalue relative to the largest diagonal.
    /// A negative value demands a strictly positive spectrum margin.
    #[arg(long, default_value_t = 1e-8, allow_negative_numbers = true)]
    pub psd_tol: f64,
    /// ε values for the PSD and Lipschitz probes.
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.5, 1.0], value_parser = crate::positive_f64)]
    pub eps_grid: Vec<f64>,
    /// Seeds per ε for the PSD probe.
    #[arg(long, default_value_t = 100)]
    pub psd_seeds: usize,
    /// Random (w, u) pairs for the radial probes.
    #[arg(long, default_value_t = 100)]
    pub directions: usize,
    /// Point pairs per ε for the Lipschitz probe.
    #[arg(long, default_value_t = 10_000)]
    pub lipschitz_samples: usize,
    /// Input widths for the dimensional-scaling probe.
    #[arg(long, value_delimiter = ',', default_values_t = [64, 256, 1024])]
    pub dims: Vec<usize>,
    /// Monte Carlo samples per width.
    #[arg(long, default_value_t = 10_000)]
    pub dim_samples: usize,
    /// Seeds for the NTK probe median.
    #[arg(long, default_value_t = 20)]
    pub ntk_seeds: usize,
}

pub fn verify(common: &Common, a: &VerifyArgs) -> Outcome {
    let cfg = ProbeConfig {
        seed: common.seed,
        eps_grid: a.eps_grid.clone(),
        psd_seeds: a.psd_seeds,
        psd_tolerance: a.psd_tol,
        directions: a.directions,
        lipschitz_samples: a.lipschitz_samples,
        dims: a.dims.clone(),
        dim_samples: a.dim_samples,
        ntk_seeds: a.ntk_seeds,
        eps: common.eps.unwrap_or(yat::kernel::DEFAULT_EPS),
        ..ProbeConfig::default()
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let reports = verify::run_all(&cfg)?;
    reports.iter().for_each(print_report);
    write_reports(common.out.join("probes.jsonl"), &reports)?;
    check_all("probes failed", &reports)
}

#[derive(Args, Debug, Serialize)]
pub struct XorArgs {
    /// Points per axis of the decision grid.
    #[arg(long, default_value_t = 101)]
    pub resolution: usize,
}

pub fn xor(common: &Common, a: &XorArgs) -> Outcome {
    let eps = common.eps.unwrap_or(0.01);
    let reports = verify::xor_certificate(eps, common.seed)?;
    let cfg = KernelConfig::fixed(eps);
    println!("prototype (1, -1), eps = {eps}");
    for ((p, class), v) in verify::XOR_POINTS.iter().zip(&reports[0].values) {
        println!("  x = ({}, {})  class {class}  response {v}", p[0], p[1]);
    }
    let t = verify::fit_xor_unit(eps, common.seed, 500, verify::XOR_MAX_STARTS)?;
    println!(
        "trained unit: w = ({:.4}, {:.4}), {} start(s), separated at step {}, threshold {:.4}, margin {:.4}",
        t.weight[0],
        t.weight[1],
        t.starts,
        t.separated_at.map_or("-".to_string(), |s| s.to_string()),
        t.threshold,
        t.margin
    );
    reports.iter().for_each(print_report);
    write_reports(common.out.join("xor.jsonl"), &reports)?;

    // resp_0 is the threshold and resp_1 the unit, so the label is the
    // predicted class
    let spec = GridSpec {
        x_min: -0.5,
        x_max: 1.5,
        y_min: -0.5,
        y_max: 1.5,
        resolution: a.resolution,
    };
    let grid = emit_boundary_grid(
        |p| vec![t.threshold, t.scale * yat(&t.weight, p, &cfg).expect("fixed eps")],
        spec,
    )
    .map_err(|e| Failure::Usage(e.to_string()))?;
    grid.write_csv(create(common.out.join("xor_grid.csv"))?)?;
    check_all("xor certificate", &reports)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Heads {
    Yat,
    Linear,
    Both,
}

#[derive(Args, Debug, Serialize)]
pub struct MnistArgs {
    /// Training images (IDX, magic 0x00000803).
    #[arg(long)]
    pub mnist_images: Option<PathBuf>,
    /// Training labels (IDX, magic 0x00000801).
    #[arg(long)]
    pub mnist_labels: Option<PathBuf>,
    /// Test images. Without test files the last seventh of the training
    /// set is held out.
    #[arg(long, requires = "mnist_test_labels")]
    pub mnist_test_images: Option<PathBuf>,
    #[arg(long, requires = "mnist_test_images")]
    pub mnist_test_labels: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3, value_parser = crate::positive_f64)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value_t = Heads::Both)]
    pub head: Heads,
    /// Initial prototype standard deviation; defaults to the RMS of the
    /// training pixels.
    #[arg(long, value_parser = crate::positive_f64)]
    pub sigma: Option<f64>,
    /// Give each ⵟ unit a learnable inner bias.
    #[arg(long)]
    pub yat_bias: bool,
}

fn split_holdout(all: Dataset) -> anyhow::Result<(Dataset, Dataset)> {
    let n = all.len();
    let cut = n - n / 7;
    let train_idx: Vec<usize> = (0..cut).collect();
    let test_idx: Vec<usize> = (cut..n).collect();
    let (xt, yt) = all.gather(&train_idx);
    let (xv, yv) = all.gather(&test_idx);
    Ok((
        Dataset::new(xt, yt, all.classes, "train")?,
        Dataset::new(xv, yv, all.classes, "test")?,
    ))
}

pub fn rms(m: &Matrix) -> f64 {
    (m.as_slice().iter().map(|v| v * v).sum::<f64>() / m.len().max(1) as f64).sqrt()
}

pub fn mnist(common: &Common, a: &MnistArgs) -> Outcome {
    let (Some(images), Some(labels)) = (&a.mnist_images, &a.mnist_labels) else {
        return Err(Failure::Usage(
            "mnist needs --mnist-images and --mnist-labels (IDX files, fetched separately)".into(),
        ));
    };
    for p in [
        Some(images),
        Some(labels),
        a.mnist_test_images.as_ref(),
        a.mnist_test_labels.as_ref(),
    ]
    .into_iter()
    .flatten()
    {
        if !p.exists() {
            return Err(Failure::Usage(format!("{} does not exist", p.display())));
        }
    }
    let all = load_mnist_idx(images, labels)?;
    let (train, test) = match (&a.mnist_test_images, &a.mnist_test_labels) {
        (Some(ti), Some(tl)) => (all, load_mnist_idx(ti, tl)?),
        _ => split_holdout(all)?,
    };
    let sigma = a.sigma.unwrap_or_else(|| rms(&train.inputs));
    println!(
        "{} training and {} test images, prototype sigma {sigma:.4}",
        train.len(),
        test.len()
    );
    let heads: &[HeadKind] = match a.head {
        Heads::Yat => &[HeadKind::Yat],
        Heads::Linear => &[HeadKind::Linear],
        Heads::Both => &[HeadKind::Yat, HeadKind::Linear],
    };
    let mut summary = create(common.out.join("inversion.csv"))?;
    writeln!(
        summary,
        "head,test_accuracy,inverted_accuracy,norm_change_percent,final_alpha"
    )?;
    for &kind in heads {
        let name = match kind {
            HeadKind::Yat => "yat",
            HeadKind::Linear => "linear",
        };
        let mut rng = Rng::new(common.seed);
        let mut head = Classifier::new(
            kind,
            train.dim(),
            train.classes,
            sigma,
            kernel(common, 1e-6),
            a.yat_bias,
            &mut rng,
        );
        let run = train_classifier(
            &mut head,
            &train,
            &test,
            &ClassifierConfig {
                epochs: a.epochs,
                batch_size: a.batch_size,
                lr: a.lr,
                seed: common.seed,
            },
        )?;
        run.log
            .write_csv(create(common.out.join(format!("metrics_{name}.csv")))?)?;
        let header: Vec<String> = (0..train.dim()).map(|i| format!("p{i}")).collect();
        write_matrix_csv(
            create(common.out.join(format!("prototypes_{name}.csv")))?,
            &header,
            head.prototypes(),
        )?;
        let (acc, inv) = invert_prototypes_eval(&head, &test)?;
        let alpha = head.alpha().map_or(String::new(), |v| v.to_string());
        writeln!(summary, "{name},{acc},{inv},{},{alpha}", run.norm_change_percent())?;
        println!(
            "{name}: test accuracy {:.2}%, inverted {:.2}%, prototype norm change {:+.2}%{}",
            100.0 * acc,
            100.0 * inv,
            run.norm_change_percent(),
            head.alpha().map_or(String::new(), |v| format!(", alpha {v:.3}"))
        );
    }
    summary.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum KindArg {
    Aether,
    Standard,
    AetherPreln,
    AetherPostln,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Aether => ModelKind::Aether,
            KindArg::Standard => ModelKind::Standard,
            KindArg::AetherPreln => ModelKind::AetherPreln,
            KindArg::AetherPostln => ModelKind::AetherPostln,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct LmArgs {
    /// UTF-8 text file; defaults to the bundled sonnets.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = KindArg::Aether)]
    pub kind: KindArg,
    #[arg(long, default_value_t = 150)]
    pub steps: usize,
    #[arg(long, default_value_t = 3e-4, value_parser = crate::positive_f64)]
    pub lr: f64,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 128)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 128)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 50)]
    pub eval_every: usize,
    /// Validation windows per evaluation.
    #[arg(long, default_value_t = 8)]
    pub eval_windows: usize,
    /// Fraction of the corpus held out for validation.
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    /// Also write the trained parameters as `<kind>.yatk`.
    #[arg(long)]
    pub checkpoint: bool,
}

pub fn lm(common: &Common, a: &LmArgs) -> Outcome {
    let text = match &a.corpus {
        Some(p) => fs::read(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
        None => SONNETS.as_bytes().to_vec(),
    };
    let corpus = char_tokenize(&text, a.val_fraction).map_err(|e| Failure::Usage(e.to_string()))?;
    let kind = ModelKind::from(a.kind);
    let cfg = ModelConfig {
        vocab: corpus.vocab_size(),
        d_model: a.d_model,
        heads: a.heads,
        layers: a.layers,
        max_len: a.seq_len,
        kind,
        tied: false,
        kernel: kernel(common, yat::kernel::DEFAULT_EPS),
    };
    let mut model = Model::new(cfg, &mut Rng::new(common.seed)).map_err(|e| Failure::Usage(e.to_string()))?;
    println!(
        "{}: {} parameters, {} normalization layers, vocabulary {}, ln V = {:.4}",
        kind.name(),
        model.num_params(),
        model.norm_layer_count(),
        corpus.vocab_size(),
        (corpus.vocab_size() as f64).ln()
    );
    lm_overfit_check(&model, &corpus, a.seq_len.min(32), a.lr * 10.0)?;
    let run = train_lm(
        &mut model,
        &corpus,
        &LmConfig {
            steps: a.steps,
            batch_size: a.batch_size,
            seq_len: a.seq_len,
            lr: a.lr,
            seed: common.seed,
            eval_every: a.eval_every,
            eval_windows: a.eval_windows,
        },
    )?;
    run.log
        .write_csv(create(common.out.join(format!("lm_{}.csv", kind.name())))?)?;
    if a.checkpoint {
        checkpoint::save(&model, &common.out.join(format!("{}.yatk", kind.name())))?;
    }
    println!(
        "validation loss {:.4} -> {:.4} ({:.1}% lower) after {} steps; diverged: {}; non-finite steps: {}",
        run.initial_val,
        run.final_val,
        100.0 * (1.0 - run.final_val / run.initial_val),
        run.steps_run,
        run.diverged,
        run.nonfinite_events
    );
    // divergence of the LayerNorm-injection variants is an outcome to record, not a failure
    let observational = matches!(kind, ModelKind::AetherPreln | ModelKind::AetherPostln);
    if !observational && (run.diverged || run.nonfinite_events > 0) {
        return Err(Failure::Check(format!("{} run diverged", kind.name())));
    }
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct BenchArgs {
    /// Batch sizes.
    #[arg(long = "batch", value_delimiter = ',', default_values_t = [96])]
    pub b: Vec<usize>,
    /// Unit counts.
    #[arg(long = "units", value_delimiter = ',', default_values_t = [96])]
    pub n: Vec<usize>,
    /// Input widths.
    #[arg(long = "dims", value_delimiter = ',', default_values_t = [256])]
    pub d: Vec<usize>,
    /// Widths for the per-neuron FLOP table.
    #[arg(long, value_delimiter = ',', default_values_t = [64, 768, 4096])]
    pub flop_dims: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Growth factor for the scaling sweep, applied to the first shape.
    #[arg(long, default_value_t = 4)]
    pub factor: usize,
}

#[derive(Serialize)]
struct ShapeRecord {
    b: usize,
    n: usize,
    d: usize,
    yat_secs: f64,
    linear_gelu_secs: f64,
    time_ratio: f64,
    yat_forward_flops: u64,
    linear_forward_flops: u64,
    yat_backward_flops: u64,
    linear_backward_flops: u64,
    yat_peak_bytes_analytic: usize,
    linear_gelu_peak_bytes_analytic: usize,
    yat_peak_bytes_measured: usize,
    linear_gelu_peak_bytes_measured: usize,
}

#[derive(Serialize)]
struct BenchRecord {
    per_neuron: Vec<PerNeuronFlops>,
    shapes: Vec<ShapeRecord>,
    scaling: Vec<bench::ScalingPoint>,
}

pub fn bench(common: &Common, a: &BenchArgs) -> Outcome {
    if [&a.b, &a.n, &a.d, &a.flop_dims]
        .iter()
        .any(|v| v.is_empty() || v.contains(&0))
        || a.factor < 2
    {
        return Err(Failure::Usage(
            "sizes must be positive and the factor at least 2".into(),
        ));
    }
    bench::keep_buffers_on_heap();
    let mut record = BenchRecord {
        per_neuron: Vec::new(),
        shapes: Vec::new(),
        scaling: Vec::new(),
    };
    for &d in &a.flop_dims {
        let t = PerNeuronFlops::new(d);
        println!(
            "flops d={d} linear_relu={} linear_gelu={} yat_naive={} yat_optimized={} ratio_vs_relu={:.4} ratio_vs_gelu={:.4}",
            t.linear_relu,
            t.linear_gelu,
            t.yat_naive,
            t.yat_optimized,
            t.optimized_vs_relu(),
            t.optimized_vs_gelu()
        );
        record.per_neuron.push(t);
    }
    let cfg = KernelConfig::default();
    for &b in &a.b {
        for &n in &a.n {
            for &d in &a.d {
                let t = bench::time_pair(b, n, d, a.repeats, common.seed)?;
                let mut rng = Rng::new(common.seed);
                let x = rng.gaussian_matrix(b, d, 1.0);
                let w = rng.gaussian_matrix(n, d, 1.0);
                let (_, yat_peak) = alloc::peak_during(|| yat_batch(&x, &w, None, &cfg));
                let (_, lin_peak) = alloc::peak_during(|| bench::linear_gelu_forward(&x, &w));
                let (yf, lf) = (bench::yat_layer_flops(b, n, d), bench::linear_layer_flops(b, n, d));
                let rec = ShapeRecord {
                    b,
                    n,
                    d,
                    yat_secs: t.yat_secs,
                    linear_gelu_secs: t.linear_gelu_secs,
                    time_ratio: t.ratio(),
                    yat_forward_flops: yf.forward,
                    linear_forward_flops: lf.forward,
                    yat_backward_flops: yf.backward,
                    linear_backward_flops: lf.backward,
                    yat_peak_bytes_analytic: bench::yat_forward_peak_bytes(b, n, d),
                    linear_gelu_peak_bytes_analytic: bench::linear_gelu_forward_peak_bytes(b, n, d),
                    yat_peak_bytes_measured: yat_peak,
                    linear_gelu_peak_bytes_measured: lin_peak,
                };
                println!(
                    "time B={b} n={n} d={d} yat_batch={:.3e}s linear_gelu={:.3e}s ratio={:.3} peak_bytes yat={} linear_gelu={}",
                    rec.yat_secs, rec.linear_gelu_secs, rec.time_ratio, yat_peak, lin_peak
                );
                record.shapes.push(rec);
            }
        }
    }
    let base = (a.b[0], a.n[0], a.d[0]);
    record.scaling = bench::scaling_sweep(base, a.factor, a.repeats, common.seed)?;
    for p in &record.scaling {
        println!(
            "scaling {}x{} time_ratio={:.3} linear_within_30pct={}",
            p.axis.name(),
            p.factor,
            p.ratio(),
            p.linear_within(0.3)
        );
    }
    let out = create(common.out.join("bench.json"))?;
    serde_json::to_writer_pretty(out, &record)?;
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct BoundaryArgs {
    /// CSV with a header row and one 2-D prototype per row. Without it,
    /// `--classes` random prototypes are drawn.
    #[arg(long)]
    pub prototypes: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Treat the prototypes as weights of a bias-free linear model.
    #[arg(long)]
    pub linear: bool,
    /// Grid covers [-extent, extent]² .
    #[arg(long, default_value_t = 2.0, value_parser = crate::positive_f64)]
    pub extent: f64,
    #[arg(long, default_value_t = 101)]
    pub resolution: usize,
}

pub fn boundary(common: &Common, a: &BoundaryArgs) -> Outcome {
    let protos = match &a.prototypes {
        Some(p) => {
            let f = File::open(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            read_matrix_csv(BufReader::new(f))?.1
        }
        None if a.classes > 0 => Rng::new(common.seed).gaussian_matrix(a.classes, 2, 1.0),
        None => return Err(Failure::Usage("--classes must be positive".into())),
    };
    if protos.cols() != 2 || protos.rows() == 0 {
        return Err(Failure::Usage(format!(
            "prototypes must be 2-D, got {:?}",
            protos.shape()
        )));
    }
    let spec = GridSpec::square(a.extent, a.resolution);
    let grid = if a.linear {
        let zeros = vec![0.0; protos.rows()];
        emit_boundary_grid(linear_responses(&protos, &zeros), spec)
    } else {
        emit_boundary_grid(yat_responses(&protos, kernel(common, yat::kernel::DEFAULT_EPS)), spec)
    }
    .map_err(|e| Failure::Usage(e.to_string()))?;
    grid.write_csv(create(common.out.join("boundary.csv"))?)?;
    println!("{} grid points, {} classes", grid.labels.len(), grid.classes);
    Ok(())
}
