//! Training loops for the prototype classifiers and the toy language model,
//! plus the metrics log they write.

use std::io::{BufRead, Write};

use crate::data::{CharCorpus, Dataset, LmBatcher};
use crate::error::{Error, Result};
use crate::kernel::KernelConfig;
use crate::linalg::{sq_norm, Matrix};
use crate::nn::{Linear, LinearCache, Model, Module, NmnCache, NmnDense, Param};
use crate::optim::{argmax_rows, softmax_xent, Adam};
use crate::rng::Rng;

/// Loss must not rise over this many steps of the memorization check.
pub const SANITY_STEPS: usize = 50;
/// Validation loss above this (or non-finite) marks a run as diverged.
pub const DIVERGENCE_LOSS: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub prototype_norm_mean: Option<f64>,
    pub alpha: Option<f64>,
}

/// Rows of `step, split, loss, accuracy, prototype_norm_mean, alpha`.
/// Missing values are empty fields.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

pub const METRICS_HEADER: &str = "step,split,loss,accuracy,prototype_norm_mean,alpha";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsLog {
    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    pub fn last(&self, split: &str) -> Option<&MetricsRow> {
        self.rows.iter().rev().find(|r| r.split == split)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{METRICS_HEADER}")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.step,
                r.split,
                r.loss,
                opt(r.accuracy),
                opt(r.prototype_norm_mean),
                opt(r.alpha)
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        match lines.next() {
            Some(h) if h.as_deref().map_err(|e| Error::parse(None, e.to_string()))? == METRICS_HEADER => {}
            _ => return Err(Error::parse(None, "missing metrics header")),
        }
        let bad = |n: usize, what: &str| Error::parse(None, format!("metrics line {}: bad {what}", n + 2));
        let mut log = MetricsLog::default();
        for (n, line) in lines.enumerate() {
            let line = line?;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(n, "field count"));
            }
            let num = |s: &str, what: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad(n, what))
                }
            };
            log.push(MetricsRow {
                step: f[0].parse().map_err(|_| bad(n, "step"))?,
                split: f[1].to_string(),
                loss: num(f[2], "loss")?.ok_or_else(|| bad(n, "loss"))?,
                accuracy: num(f[3], "accuracy")?,
                prototype_norm_mean: num(f[4], "prototype_norm_mean")?,
                alpha: num(f[5], "alpha")?,
            });
        }
        Ok(log)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Yat,
    Linear,
}

/// A single layer mapping inputs straight to class logits, one prototype
/// row per class.
#[derive(Clone, Debug)]
pub enum Classifier {
    Yat(NmnDense),
    Linear(Linear),
}

#[derive(Clone, Debug)]
pub enum ClassifierCache {
    Yat(NmnCache),
    Linear(LinearCache),
}

impl Classifier {
    /// Prototypes drawn from `N(0, σ²)`. Neither head has an additive bias;
    /// `yat_bias` switches on the inner bias of the ⵟ units.
    pub fn new(
        kind: HeadKind,
        d: usize,
        classes: usize,
        sigma: f64,
        cfg: KernelConfig,
        yat_bias: bool,
        rng: &mut Rng,
    ) -> Self {
        match kind {
            HeadKind::Yat => Classifier::Yat(NmnDense::with_sigma("head", d, classes, yat_bias, cfg, sigma, rng)),
            HeadKind::Linear => Classifier::Linear(Linear {
                weight: Param::gaussian("head.weight", classes, d, sigma, rng),
                bias: None,
            }),
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            Classifier::Yat(_) => HeadKind::Yat,
            Classifier::Linear(_) => HeadKind::Linear,
        }
    }

    pub fn prototypes(&self) -> &Matrix {
        match self {
            Classifier::Yat(n) => &n.weight.value,
            Classifier::Linear(l) => &l.weight.value,
        }
    }

    pub fn prototypes_mut(&mut self) -> &mut Matrix {
        match self {
            Classifier::Yat(n) => &mut n.weight.value,
            Classifier::Linear(l) => &mut l.weight.value,
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match self {
            Classifier::Yat(n) => Some(n.alpha()),
            Classifier::Linear(_) => None,
        }
    }

    pub fn prototype_norms(&self) -> Vec<f64> {
        self.prototypes().iter_rows().map(|r| sq_norm(r).sqrt()).collect()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ClassifierCache)> {
        match self {
            Classifier::Yat(n) => n.forward(x).map(|(y, c)| (y, ClassifierCache::Yat(c))),
            Classifier::Linear(l) => l.forward(x).map(|(y, c)| (y, ClassifierCache::Linear(c))),
        }
    }

    pub fn backward(&mut self, cache: &ClassifierCache, upstream: &Matrix) -> Result<Matrix> {
        match (self, cache) {
            (Classifier::Yat(n), ClassifierCache::Yat(c)) => n.backward(c, upstream),
            (Classifier::Linear(l), ClassifierCache::Linear(c)) => l.backward(c, upstream),
            _ => Err(Error::Cache("classifier kind does not match cache".into())),
        }
    }

    /// Mean cross-entropy and accuracy over `data`.
    pub fn evaluate(&self, data: &Dataset) -> Result<(f64, f64)> {
        let mut loss = 0.0;
        let mut correct = 0;
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(1000) {
            let (x, y) = data.gather(chunk);
            let (logits, _) = self.forward(&x)?;
            loss += softmax_xent(&logits, &y)?.0 * chunk.len() as f64;
            correct += argmax_rows(&logits).iter().zip(&y).filter(|(p, t)| p == t).count();
        }
        let n = data.len().max(1) as f64;
        Ok((loss / n, correct as f64 / n))
    }

    fn step(&mut self, opt: &mut Adam, x: &Matrix, y: &[usize]) -> Result<f64> {
        self.zero_grad();
        let (logits, cache) = self.forward(x)?;
        let (loss, g) = softmax_xent(&logits, y)?;
        self.backward(&cache, &g)?;
        opt.step(self)?;
        Ok(loss)
    }
}

impl Module for Classifier {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        match self {
            Classifier::Yat(n) => n.visit_params(f),
            Classifier::Linear(l) => l.visit_params(f),
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Classifier::Yat(n) => n.visit_params_mut(f),
            Classifier::Linear(l) => l.visit_params_mut(f),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct ClassifierRun {
    pub log: MetricsLog,
    pub initial_norms: Vec<f64>,
    pub final_norms: Vec<f64>,
    pub alpha_trajectory: Vec<f64>,
}

impl ClassifierRun {
    /// Relative change of the mean prototype norm, in percent.
    pub fn norm_change_percent(&self) -> f64 {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        100.0 * (mean(&self.final_norms) / mean(&self.initial_norms) - 1.0)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Fits a copy of `head` to one micro-batch for [`SANITY_STEPS`] steps and
/// fails if the loss ends higher than it started.
pub fn overfit_check(head: &Classifier, data: &Dataset, lr: f64) -> Result<()> {
    let micro = data.head(64);
    let mut probe = head.clone();
    let mut opt = Adam::new(lr);
    let first = probe.step(&mut opt, &micro.inputs, &micro.labels)?;
    for _ in 1..SANITY_STEPS {
        probe.step(&mut opt, &micro.inputs, &micro.labels)?;
    }
    let (last, _) = probe.evaluate(&micro)?;
    if !(last <= first) {
        return Err(Error::Diverged(format!(
            "memorization check: loss went from {first} to {last} over {SANITY_STEPS} steps on {} samples",
            micro.len()
        )));
    }
    Ok(())
}

/// Mini-batch Adam on softmax cross-entropy. Logs one `train` and one
/// `test` row per epoch (step 0 holds the untrained evaluation).
pub fn train_classifier(
    head: &mut Classifier,
    train: &Dataset,
    test: &Dataset,
    cfg: &ClassifierConfig,
) -> Result<ClassifierRun> {
    if cfg.batch_size == 0 {
        return Err(Error::Input("batch size must be at least 1".into()));
    }
    if train.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    if train.dim() != head.prototypes().cols() || train.classes != head.prototypes().rows() {
        return Err(Error::shape(
            "train_classifier",
            format!(
                "{} features and {} classes",
                head.prototypes().cols(),
                head.prototypes().rows()
            ),
            format!("{} features and {} classes", train.dim(), train.classes),
        ));
    }
    overfit_check(head, train, cfg.lr)?;

    let mut rng = Rng::new(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut log = MetricsLog::default();
    let initial_norms = head.prototype_norms();
    let mut alpha_trajectory: Vec<f64> = head.alpha().into_iter().collect();
    let record = |log: &mut MetricsLog, head: &Classifier, step: usize, split: &str, loss: f64, acc: f64| {
        log.push(MetricsRow {
            step,
            split: split.into(),
            loss,
            accuracy: Some(acc),
            prototype_norm_mean: Some(mean(&head.prototype_norms())),
            alpha: head.alpha(),
        })
    };
    let (l0, a0) = head.evaluate(test)?;
    record(&mut log, head, 0, "test", l0, a0);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.gather(chunk);
            head.zero_grad();
            let (logits, cache) = head.forward(&x)?;
            let (loss, g) = softmax_xent(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("non-finite training loss at step {step}")));
            }
            correct += argmax_rows(&logits).iter().zip(&y).filter(|(p, t)| p == t).count();
            loss_sum += loss * chunk.len() as f64;
            head.backward(&cache, &g)?;
            opt.step(head)?;
            step += 1;
        }
        if !head.all_finite() {
            return Err(Error::Diverged(format!("non-finite parameters after step {step}")));
        }
        let n = train.len() as f64;
        record(&mut log, head, step, "train", loss_sum / n, correct as f64 / n);
        let (tl, ta) = head.evaluate(test)?;
        record(&mut log, head, step, "test", tl, ta);
        alpha_trajectory.extend(head.alpha());
    }
    Ok(ClassifierRun {
        log,
        initial_norms,
        final_norms: head.prototype_norms(),
        alpha_trajectory,
    })
}

/// Test accuracy with the learned prototypes and with every prototype
/// negated.
pub fn invert_prototypes_eval(head: &Classifier, data: &Dataset) -> Result<(f64, f64)> {
    let (_, original) = head.evaluate(data)?;
    let mut flipped = head.clone();
    flipped.prototypes_mut().scale(-1.0);
    let (_, inverted) = flipped.evaluate(data)?;
    Ok((original, inverted))
}

#[derive(Clone, Debug)]
pub struct LmConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub seed: u64,
    /// Evaluate every this many steps (and at the end).
    pub eval_every: usize,
    /// Validation windows per evaluation.
    pub eval_windows: usize,
}

#[derive(Clone, Debug)]
pub struct LmRun {
    pub log: MetricsLog,
    pub initial_val: f64,
    pub final_val: f64,
    pub diverged: bool,
    /// Steps whose loss or parameters were not finite.
    pub nonfinite_events: usize,
    pub steps_run: usize,
}

/// Mean next-token cross-entropy over `windows` evenly spaced windows of `ids`.
pub fn lm_eval(model: &Model, ids: &[usize], seq_len: usize, windows: usize) -> Result<f64> {
    if ids.len() < seq_len + 1 || windows == 0 {
        return Err(Error::Input(format!(
            "{} tokens cannot hold an evaluation window of {}",
            ids.len(),
            seq_len + 1
        )));
    }
    let span = ids.len() - seq_len - 1;
    let mut total = 0.0;
    for w in 0..windows {
        let start = if windows == 1 { 0 } else { span * w / (windows - 1) };
        let (logits, _) = model.forward(&ids[start..start + seq_len])?;
        total += softmax_xent(&logits, &ids[start + 1..start + seq_len + 1])?.0;
    }
    Ok(total / windows as f64)
}

fn lm_step(model: &mut Model, opt: &mut Adam, batch: &[(Vec<usize>, Vec<usize>)]) -> Result<f64> {
    model.zero_grad();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (x, y) in batch {
        let (logits, cache) = model.forward(x)?;
        let (loss, mut g) = softmax_xent(&logits, y)?;
        g.scale(scale);
        model.backward(&cache, &g)?;
        total += loss * scale;
    }
    if total.is_finite() {
        opt.step(model)?;
    }
    Ok(total)
}

/// Trains a copy of `model` on one fixed micro-batch for [`SANITY_STEPS`]
/// steps and fails if the loss ends higher than it started.
pub fn lm_overfit_check(model: &Model, corpus: &CharCorpus, seq_len: usize, lr: f64) -> Result<()> {
    let mut probe = model.clone();
    let mut opt = Adam::new(lr);
    let batch = LmBatcher::new(corpus.train(), seq_len, 2, Rng::new(0))?.next_batch();
    let first = lm_step(&mut probe, &mut opt, &batch)?;
    for _ in 1..SANITY_STEPS {
        lm_step(&mut probe, &mut opt, &batch)?;
    }
    let mut last = 0.0;
    for (x, y) in &batch {
        last += softmax_xent(&probe.forward(x)?.0, y)?.0 / batch.len() as f64;
    }
    if !(last <= first) {
        return Err(Error::Diverged(format!(
            "memorization check: loss went from {first} to {last} over {SANITY_STEPS} steps"
        )));
    }
    Ok(())
}

/// Adam on next-token cross-entropy. Stops early once the validation loss
/// exceeds [`DIVERGENCE_LOSS`] or stops being finite.
pub fn train_lm(model: &mut Model, corpus: &CharCorpus, cfg: &LmConfig) -> Result<LmRun> {
    if cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(Error::Input("batch size and eval cadence must be positive".into()));
    }
    if model.cfg.vocab != corpus.vocab_size() || cfg.seq_len > model.cfg.max_len {
        return Err(Error::Input(format!(
            "model (vocab {}, max_len {}) does not fit corpus vocab {} with windows of {}",
            model.cfg.vocab,
            model.cfg.max_len,
            corpus.vocab_size(),
            cfg.seq_len
        )));
    }
    let mut batches = LmBatcher::new(corpus.train(), cfg.seq_len, cfg.batch_size, Rng::new(cfg.seed))?;
    let eval = |m: &Model| lm_eval(m, corpus.val(), cfg.seq_len, cfg.eval_windows);
    let mut opt = Adam::new(cfg.lr);
    let mut log = MetricsLog::default();
    let val_row = |step: usize, loss: f64| MetricsRow {
        step,
        split: "val".into(),
        loss,
        accuracy: None,
        prototype_norm_mean: None,
        alpha: None,
    };
    let initial_val = eval(model)?;
    log.push(val_row(0, initial_val));

    let (mut diverged, mut nonfinite, mut final_val, mut steps_run) = (false, 0, initial_val, 0);
    for step in 1..=cfg.steps {
        let batch = batches.next_batch();
        let loss = lm_step(model, &mut opt, &batch)?;
        steps_run = step;
        if !loss.is_finite() || !model.all_finite() {
            nonfinite += 1;
        }
        log.push(MetricsRow {
            loss,
            split: "train".into(),
            ..val_row(step, loss)
        });
        if step % cfg.eval_every == 0 || step == cfg.steps {
            final_val = eval(model)?;
            log.push(val_row(step, final_val));
            if !(final_val <= DIVERGENCE_LOSS) {
                diverged = true;
                break;
            }
        }
    }
    Ok(LmRun {
        log,
        initial_val,
        final_val,
        diverged,
        nonfinite_events: nonfinite,
        steps_run,
    })
}
