//! Deformations and evaluation procedures: Gaussian noise at a target SNR,
//! gradient-sign attacks, a minimal-perturbation line search, fault dropout
//! and weight quantization.
//!
//! Every image draws randomness from its own stream, keyed by seed and global
//! image index, so batched and parallel evaluation give identical results.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::network::{backward, forward, forward_with_hook, forward_with_trace, softmax_cross_entropy, NetworkModel};
use crate::rng::{substream, Stream};
use crate::tensor::{DenseTensor, Scalar};

/// Images per work unit in parallel evaluation.
pub const EVAL_CHUNK: usize = 50;

/// Label of the minimal-perturbation search in reports.
pub const MINIMAL_L2_LABEL: &str = "minimal-l2-fgsm-search";

/// One row of an attack report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub attack: String,
    pub param: f64,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttackReport {
    records: Vec<ReportRecord>,
}

impl AttackReport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a record, rejecting accuracies outside `[0, 1]` and negative
    /// distances.
    pub fn push(&mut self, record: ReportRecord) -> Result<()> {
        let ok = match record.metric.as_str() {
            "accuracy" | "censored_fraction" => (0.0..=1.0).contains(&record.value),
            _ => record.value >= 0.0,
        };
        if !ok {
            return Err(Error::Parameter(format!("{} = {} is out of range", record.metric, record.value)));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn extend(&mut self, records: impl IntoIterator<Item = ReportRecord>) -> Result<()> {
        records.into_iter().try_for_each(|r| self.push(r))
    }

    pub fn records(&self) -> &[ReportRecord] {
        &self.records
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// How a gradient-sign attack sets its step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FgsmStrength {
    Epsilon(f64),
    /// Per-image ε giving this SNR (dB): `ε = √(P / 10^(snr/10))`.
    SnrDb(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttackKind {
    Clean,
    Gaussian { snr_db: f64 },
    Fgsm { strength: FgsmStrength, before_normalization: bool },
    Dropout { p: f64 },
    Quantize { bits: u32 },
    MinimalL2 { max_steps: usize },
}

impl AttackKind {
    pub fn label(&self) -> String {
        match self {
            AttackKind::Clean => "clean".into(),
            AttackKind::Gaussian { .. } => "gaussian".into(),
            AttackKind::Fgsm { strength, before_normalization } => {
                let s = match strength {
                    FgsmStrength::Epsilon(_) => "eps",
                    FgsmStrength::SnrDb(_) => "snr",
                };
                let n = if *before_normalization { "before" } else { "after" };
                format!("fgsm-{s}-{n}-norm")
            }
            AttackKind::Dropout { .. } => "dropout".into(),
            AttackKind::Quantize { .. } => "quantize".into(),
            AttackKind::MinimalL2 { .. } => MINIMAL_L2_LABEL.into(),
        }
    }

    pub fn param(&self) -> f64 {
        match *self {
            AttackKind::Clean => 0.0,
            AttackKind::Gaussian { snr_db } => snr_db,
            AttackKind::Fgsm { strength: FgsmStrength::Epsilon(e), .. } => e,
            AttackKind::Fgsm { strength: FgsmStrength::SnrDb(s), .. } => s,
            AttackKind::Dropout { p } => p,
            AttackKind::Quantize { bits } => bits as f64,
            AttackKind::MinimalL2 { max_steps } => max_steps as f64,
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackKind::Clean => f.write_str("clean"),
            _ => write!(f, "{}:{}", self.label(), self.param()),
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    /// `clean`, `gaussian:15`, `fgsm-eps-after-norm:0.1`, `fgsm-snr-before-norm:20`,
    /// `dropout:0.25`, `quantize:5`, `minimal-l2-fgsm-search:20`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown attack {s:?}"));
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = || -> Result<f64> { arg.ok_or_else(bad)?.parse::<f64>().map_err(|_| bad()) };
        let kind = match name {
            "clean" if arg.is_none() => AttackKind::Clean,
            "gaussian" => AttackKind::Gaussian { snr_db: num()? },
            "dropout" => {
                let p = num()?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Config(format!("dropout probability {p} outside [0, 1]")));
                }
                AttackKind::Dropout { p }
            }
            "quantize" => {
                let b = num()?;
                if b.fract() != 0.0 || !(1.0..=24.0).contains(&b) {
                    return Err(Error::Config(format!("bit width {b} must be an integer in [1, 24]")));
                }
                AttackKind::Quantize { bits: b as u32 }
            }
            MINIMAL_L2_LABEL => {
                let n = num()?;
                if n.fract() != 0.0 || n < 1.0 {
                    return Err(bad());
                }
                AttackKind::MinimalL2 { max_steps: n as usize }
            }
            other => {
                let rest = other.strip_prefix("fgsm-").ok_or_else(bad)?;
                let (kind, space) = rest.split_once('-').ok_or_else(bad)?;
                let v = num()?;
                let strength = match kind {
                    "eps" if v >= 0.0 => FgsmStrength::Epsilon(v),
                    "snr" => FgsmStrength::SnrDb(v),
                    _ => return Err(bad()),
                };
                let before_normalization = match space {
                    "before-norm" => true,
                    "after-norm" => false,
                    _ => return Err(bad()),
                };
                AttackKind::Fgsm { strength, before_normalization }
            }
        };
        Ok(kind)
    }
}

/// Mean of squared entries.
pub fn signal_power<S: Scalar>(x: &[S]) -> f64 {
    x.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / x.len() as f64
}

/// `10·log10(P_signal / P_noise)`.
pub fn snr_db<S: Scalar>(clean: &[S], noisy: &[S]) -> f64 {
    let noise: Vec<f64> = clean.iter().zip(noisy).map(|(a, b)| b.as_f64() - a.as_f64()).collect();
    10.0 * (signal_power(clean) / signal_power(&noise)).log10()
}

#[derive(Debug, Clone)]
pub struct NoisyBatch<S> {
    pub images: DenseTensor<S>,
    /// Batch positions of all-zero images, returned unchanged.
    pub degenerate: Vec<usize>,
}

/// Adds Gaussian noise rescaled per image to the exact target SNR (dB).
/// `snr_db = +∞` leaves the batch unchanged.
pub fn gaussian_noise_at_snr<S: Scalar>(images: &DenseTensor<S>, snr_db: f64, seed: u64) -> Result<NoisyBatch<S>> {
    gaussian_noise_from(images, snr_db, seed, 0)
}

/// As [`gaussian_noise_at_snr`] for images whose global indices start at
/// `first_index`.
pub fn gaussian_noise_from<S: Scalar>(
    images: &DenseTensor<S>,
    snr_db: f64,
    seed: u64,
    first_index: usize,
) -> Result<NoisyBatch<S>> {
    if !images.is_finite() {
        return Err(Error::Parameter("images contain non-finite values".into()));
    }
    if snr_db.is_nan() {
        return Err(Error::Parameter("SNR is NaN".into()));
    }
    let mut out = images.clone();
    let mut degenerate = Vec::new();
    if snr_db == f64::INFINITY {
        return Ok(NoisyBatch { images: out, degenerate });
    }
    let per = images.inner();
    for (i, img) in out.data_mut().chunks_exact_mut(per).enumerate() {
        let power = signal_power(img);
        if power == 0.0 {
            degenerate.push(i);
            continue;
        }
        let mut rng = substream(seed, Stream::Noise, (first_index + i) as u64);
        let noise: Vec<f64> = (0..per).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let target = power / 10f64.powf(snr_db / 10.0);
        let scale = (target / signal_power(&noise)).sqrt();
        for (v, n) in img.iter_mut().zip(&noise) {
            *v = S::of_f64(v.as_f64() + scale * n);
        }
    }
    Ok(NoisyBatch { images: out, degenerate })
}

/// Cross-entropy gradient with respect to the input batch.
pub fn input_gradient<S: Scalar>(model: &NetworkModel<S>, images: &DenseTensor<S>, labels: &[usize]) -> Result<DenseTensor<S>> {
    let trace = forward_with_trace(model, images)?;
    let (_, dlogits) = softmax_cross_entropy(trace.logits(), labels)?;
    Ok(backward(model, &trace, &dlogits, &[])?.input)
}

#[inline]
fn sign<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        S::one()
    } else if v < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

/// `ε = √(P / 10^(snr/10))`: the sign-noise step whose power gives `snr_db`.
pub fn epsilon_for_snr(power: f64, snr_db: f64) -> f64 {
    (power / 10f64.powf(snr_db / 10.0)).sqrt()
}

/// Single-step gradient-sign attack on normalized images.
///
/// With `before` set, the step is taken in raw pixel space and the result is
/// renormalized with those statistics. Under [`FgsmStrength::SnrDb`], signal
/// power is measured in the space the step is taken in.
pub fn fgsm<S: Scalar>(
    model: &NetworkModel<S>,
    images: &DenseTensor<S>,
    labels: &[usize],
    strength: FgsmStrength,
    before: Option<&NormStats>,
) -> Result<DenseTensor<S>> {
    let grad = input_gradient(model, images, labels)?;
    let per = images.inner();
    let shape = images.shape();
    let hw = if shape.len() == 4 { shape[2] * shape[3] } else { per };
    let channels = per / hw;
    if let Some(stats) = before {
        if stats.channels() != channels {
            return Err(Error::Shape(format!("{}-channel statistics for {channels}-channel images", stats.channels())));
        }
    }
    let mut out = images.clone();
    for (img, g) in out.data_mut().chunks_exact_mut(per).zip(grad.data().chunks_exact(per)) {
        let eps = match strength {
            FgsmStrength::Epsilon(e) => e,
            FgsmStrength::SnrDb(snr) => {
                let power = match before {
                    Some(stats) => {
                        let raw: Vec<f64> = img
                            .iter()
                            .enumerate()
                            .map(|(k, v)| v.as_f64() * stats.std[k / hw] + stats.mean[k / hw])
                            .collect();
                        signal_power(&raw)
                    }
                    None => signal_power(img),
                };
                epsilon_for_snr(power, snr)
            }
        };
        for (k, (v, &gv)) in img.iter_mut().zip(g).enumerate() {
            // Raw-space step (x·σ + μ) + ε·sign, renormalized, is x + ε·sign/σ.
            let step = match before {
                Some(stats) => eps / stats.std[k / hw],
                None => eps,
            };
            *v = *v + S::of_f64(step) * sign(gv);
        }
    }
    Ok(out)
}

/// Argmax per row, ties to the lower class.
pub fn argmax_rows<S: Scalar>(logits: &DenseTensor<S>) -> Vec<usize> {
    logits
        .data()
        .chunks_exact(logits.inner())
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Runs `f` over fixed chunks of images in parallel and concatenates the
/// results in order. `f` receives the chunk and its first global index.
pub fn map_chunks<S, T, F>(images: &DenseTensor<S>, f: F) -> Result<Vec<T>>
where
    S: Scalar,
    T: Send,
    F: Fn(DenseTensor<S>, usize) -> Result<Vec<T>> + Sync,
{
    let n = images.outer();
    let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    let parts: Vec<Vec<T>> = starts
        .par_iter()
        .map(|&s| f(images.slice_outer(s, (s + EVAL_CHUNK).min(n)), s))
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

pub fn predict<S: Scalar>(model: &NetworkModel<S>, images: &DenseTensor<S>) -> Result<Vec<usize>> {
    map_chunks(images, |chunk, _| Ok(argmax_rows(&forward(model, &chunk)?)))
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    predictions.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// Zeroes each value independently with probability `p`; returns how many
/// were dropped.
pub fn dropout_in_place<S: Scalar, R: Rng>(values: &mut [S], p: f64, rng: &mut R) -> usize {
    let mut dropped = 0;
    for v in values {
        if rng.random::<f64>() < p {
            *v = S::zero();
            dropped += 1;
        }
    }
    dropped
}

fn check_probability(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Parameter(format!("probability {p} outside [0, 1]")))
    }
}

/// Logits with fault dropout after every monitored ReLU, no rescaling.
/// Image `i` of the batch uses the stream for global index `first_index + i`.
pub fn fault_dropout_logits<S: Scalar>(
    model: &NetworkModel<S>,
    images: &DenseTensor<S>,
    p: f64,
    seed: u64,
    first_index: usize,
) -> Result<DenseTensor<S>> {
    check_probability(p)?;
    let mut rngs: Vec<_> = (0..images.outer())
        .map(|i| substream(seed, Stream::Dropout, (first_index + i) as u64))
        .collect();
    let trace = forward_with_hook(model, images, |_, act| {
        let per = act.inner();
        for (row, rng) in act.data_mut().chunks_exact_mut(per).zip(rngs.iter_mut()) {
            dropout_in_place(row, p, rng);
        }
    })?;
    Ok(trace.logits().clone())
}

/// Predictions under fault dropout.
pub fn fault_dropout_eval<S: Scalar>(model: &NetworkModel<S>, images: &DenseTensor<S>, p: f64, seed: u64) -> Result<Vec<usize>> {
    check_probability(p)?;
    map_chunks(images, |chunk, start| Ok(argmax_rows(&fault_dropout_logits(model, &chunk, p, seed, start)?)))
}

/// Maps `values` onto `2^bits` evenly spaced levels between their min and max.
/// Nearest level wins, ties go to the lower level, the top level is exactly
/// the max.
pub fn quantize_values<S: Scalar>(values: &mut [S], bits: u32) -> Result<()> {
    if !(1..=24).contains(&bits) {
        return Err(Error::Parameter(format!("bit width {bits} must be in [1, 24]")));
    }
    let Some(first) = values.first() else { return Ok(()) };
    let (mut lo, mut hi) = (first.as_f64(), first.as_f64());
    for v in values.iter() {
        lo = lo.min(v.as_f64());
        hi = hi.max(v.as_f64());
    }
    if hi == lo {
        return Ok(());
    }
    let top = (1u64 << bits) - 1;
    let step = (hi - lo) / top as f64;
    for v in values.iter_mut() {
        let pos = (v.as_f64() - lo) / step;
        let below = pos.floor();
        let mut idx = if pos - below > 0.5 { below + 1.0 } else { below } as u64;
        idx = idx.min(top);
        *v = S::of_f64(if idx == top { hi } else { lo + idx as f64 * step });
    }
    Ok(())
}

/// Copy of `model` with each layer's weights quantized; biases untouched.
pub fn quantize_weights<S: Scalar>(model: &NetworkModel<S>, bits: u32) -> Result<NetworkModel<S>> {
    let mut out = model.clone();
    for layer in out.layers_mut() {
        quantize_values(layer.weights.data_mut(), bits)?;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct MinimalL2Result<S> {
    pub adversarial: DenseTensor<S>,
    /// `‖δ‖₂ / √N` of the returned perturbation.
    pub distance: f64,
    /// Largest step found not to fool the model along the final direction.
    pub lo: f64,
    /// Smallest step found to fool it (the returned one).
    pub hi: f64,
    /// No misclassification within the step budget; `distance` is then the
    /// distance of the largest step tried.
    pub censored: bool,
}

const SEARCH_START: f64 = 1e-3;
const BISECTION_STEPS: usize = 30;

fn fools<S: Scalar>(model: &NetworkModel<S>, image: &DenseTensor<S>, dir: &[S], eps: f64, label: usize) -> Result<bool> {
    let x = step_along(image, dir, eps);
    Ok(argmax_rows(&forward(model, &x)?)[0] != label)
}

fn step_along<S: Scalar>(image: &DenseTensor<S>, dir: &[S], eps: f64) -> DenseTensor<S> {
    let e = S::of_f64(eps);
    let mut x = image.clone();
    x.data_mut().iter_mut().zip(dir).for_each(|(v, &d)| *v = *v + e * d);
    x
}

fn rms(dir: &[f64], eps: f64) -> f64 {
    eps * (dir.iter().map(|d| d * d).sum::<f64>() / dir.len() as f64).sqrt()
}

/// Smallest gradient-sign step that changes the prediction of one image
/// (batch of size 1).
///
/// The step doubles from a small start, re-reading the gradient sign at the
/// current point each time. Once an iterate fools the model, the bracket is
/// tightened toward the clean side along that last direction and then refined
/// by bisection.
pub fn minimal_l2_search<S: Scalar>(
    model: &NetworkModel<S>,
    image: &DenseTensor<S>,
    label: usize,
    max_steps: usize,
) -> Result<MinimalL2Result<S>> {
    if image.outer() != 1 {
        return Err(Error::Shape(format!("expected a single image, got a batch of {}", image.outer())));
    }
    if argmax_rows(&forward(model, image)?)[0] != label {
        return Ok(MinimalL2Result { adversarial: image.clone(), distance: 0.0, lo: 0.0, hi: 0.0, censored: false });
    }
    let mut eps = SEARCH_START;
    let mut current = image.clone();
    let mut found = None;
    for _ in 0..max_steps.max(1) {
        let g = input_gradient(model, &current, &[label])?;
        let dir: Vec<S> = g.data().iter().map(|&v| sign(v)).collect();
        if dir.iter().all(|d| *d == S::zero()) {
            break;
        }
        if fools(model, image, &dir, eps, label)? {
            found = Some(dir);
            break;
        }
        current = step_along(image, &dir, eps);
        eps *= 2.0;
    }
    let Some(dir) = found else {
        let last = current.data().iter().zip(image.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).abs());
        let distance = (last.map(|d| d * d).sum::<f64>() / image.len() as f64).sqrt();
        return Ok(MinimalL2Result { adversarial: current, distance, lo: 0.0, hi: eps / 2.0, censored: true });
    };
    let mut hi = eps;
    let mut lo = eps / 2.0;
    while lo > 0.0 && fools(model, image, &dir, lo, label)? {
        hi = lo;
        lo = if lo < SEARCH_START * 1e-6 { 0.0 } else { lo / 2.0 };
    }
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if fools(model, image, &dir, mid, label)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let dir64: Vec<f64> = dir.iter().map(|d| d.as_f64()).collect();
    Ok(MinimalL2Result { adversarial: step_along(image, &dir, hi), distance: rms(&dir64, hi), lo, hi, censored: false })
}

/// Inputs for an evaluation run: normalized images, labels and the statistics
/// used to normalize them.
#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a> {
    pub images: &'a DenseTensor<f32>,
    pub labels: &'a [usize],
    pub stats: &'a NormStats,
}

/// Runs one attack with one seed over the whole set.
pub fn run_attack(model: &NetworkModel<f32>, set: EvalSet<'_>, attack: &AttackKind, seed: u64) -> Result<Vec<ReportRecord>> {
    let record = |metric: &str, value: f64| ReportRecord {
        attack: attack.label(),
        param: attack.param(),
        seed,
        metric: metric.into(),
        value,
    };
    let preds = match *attack {
        AttackKind::Clean => predict(model, set.images)?,
        AttackKind::Gaussian { snr_db } => map_chunks(set.images, |chunk, start| {
            let noisy = gaussian_noise_from(&chunk, snr_db, seed, start)?;
            Ok(argmax_rows(&forward(model, &noisy.images)?))
        })?,
        AttackKind::Fgsm { strength, before_normalization } => map_chunks(set.images, |chunk, start| {
            let labels = &set.labels[start..start + chunk.outer()];
            let adv = fgsm(model, &chunk, labels, strength, before_normalization.then_some(set.stats))?;
            Ok(argmax_rows(&forward(model, &adv)?))
        })?,
        AttackKind::Dropout { p } => fault_dropout_eval(model, set.images, p, seed)?,
        AttackKind::Quantize { bits } => predict(&quantize_weights(model, bits)?, set.images)?,
        AttackKind::MinimalL2 { max_steps } => {
            let results = map_chunks(set.images, |chunk, start| {
                (0..chunk.outer())
                    .map(|i| {
                        let r = minimal_l2_search(model, &chunk.slice_outer(i, i + 1), set.labels[start + i], max_steps)?;
                        Ok((r.distance, r.censored))
                    })
                    .collect()
            })?;
            let n = results.len().max(1) as f64;
            let mean = results.iter().map(|r| r.0).sum::<f64>() / n;
            let censored = results.iter().filter(|r| r.1).count() as f64 / n;
            return Ok(vec![record("mean_l2_pixel_distance", mean), record("censored_fraction", censored)]);
        }
    };
    Ok(vec![record("accuracy", accuracy(&preds, set.labels))])
}
