//! Experiment configuration, the training loop and the train / eval / inspect
//! commands behind the CLI.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, NormStats, SyntheticSpec};
use crate::error::{Error, Result};
use crate::graph::{self, GraphOptions};
use crate::network::{
    backward, forward, forward_with_trace, read_checkpoint, softmax_cross_entropy, write_checkpoint, HiddenLayerSpec,
    ModelSpec, NetworkModel, Sgd,
};
use crate::regularizers::{apply_parseval, smoothness_regularizer, RegularizerConfig};
use crate::rng::{substream, Stream};
use crate::robustness::{self, AttackKind, AttackReport, EvalSet};
use crate::signals::{make_label_signals, SmoothnessProfile};
use crate::tensor::DenseTensor;

pub const CHECKPOINT_FILE: &str = "model.lsm";
pub const METRICS_FILE: &str = "metrics.json";
pub const REPORT_FILE: &str = "report.json";
pub const SMOOTHNESS_CSV: &str = "smoothness.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Idx,
    Cifar,
}

/// Every knob of a run. Serialized as one flat JSON object; missing fields
/// take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate once `lr_drop_fraction` of the epochs have run.
    pub lr_final: f64,
    pub lr_drop_fraction: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub power_m: u32,
    /// kNN neighbours; `null` is the whole batch.
    pub k: Option<usize>,
    pub beta: f64,
    pub parseval: bool,
    pub renormalize_conv: bool,
    pub clamp_negative_similarities: bool,
    pub seed: u64,
    /// Hidden layers, e.g. `conv3x3:8`, `conv3x3_strided:16`, `dense:32:residual`.
    pub layers: Vec<String>,
    /// Layer indices whose ReLU outputs are monitored; `null` is every ReLU.
    pub monitored_points: Option<Vec<usize>>,
    pub dataset: DatasetKind,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub cifar_train: Vec<PathBuf>,
    pub cifar_test: Vec<PathBuf>,
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    pub synthetic: SyntheticSpec,
    /// Test batches averaged into each epoch's smoothness profile.
    pub profile_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 100,
            lr: 0.1,
            lr_final: 0.001,
            lr_drop_fraction: 0.5,
            momentum: 0.9,
            weight_decay: 0.0005,
            gamma: 0.01,
            power_m: 2,
            k: None,
            beta: 0.01,
            parseval: false,
            renormalize_conv: false,
            clamp_negative_similarities: true,
            seed: 0,
            layers: ["conv3x3:8", "conv3x3_strided:16", "conv3x3:16", "dense:32"].map(String::from).to_vec(),
            monitored_points: None,
            dataset: DatasetKind::Synthetic,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            cifar_train: Vec::new(),
            cifar_test: Vec::new(),
            train_subset: Some(2000),
            test_subset: Some(1000),
            synthetic: SyntheticSpec::default(),
            profile_batches: 5,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn regularizer(&self) -> RegularizerConfig {
        RegularizerConfig {
            gamma: self.gamma,
            power_m: self.power_m,
            k: self.k,
            beta: self.beta,
            parseval_enabled: self.parseval,
            clamp_negative_similarities: self.clamp_negative_similarities,
        }
    }

    pub fn hidden_layers(&self) -> Result<Vec<HiddenLayerSpec>> {
        self.layers.iter().map(|s| s.parse()).collect()
    }

    /// Learning rate used during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if (epoch as f64) < self.lr_drop_fraction * self.epochs as f64 {
            self.lr
        } else {
            self.lr_final
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lr", self.lr),
            ("lr_final", self.lr_final),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("gamma", self.gamma),
            ("beta", self.beta),
        ];
        if let Some((name, v)) = nonneg.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
        }
        if !(0.0..=1.0).contains(&self.lr_drop_fraction) {
            return Err(Error::Config("lr_drop_fraction must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.gamma > 0.0 && self.batch_size < 2 {
            return Err(Error::Config("the regularizer needs batches of at least 2 examples".into()));
        }
        self.regularizer().validate()?;
        let hidden = self.hidden_layers()?;
        let relus = hidden.len();
        if let Some(points) = &self.monitored_points {
            if points.windows(2).any(|w| w[0] >= w[1]) || points.iter().any(|&p| p >= relus) {
                return Err(Error::Config(format!("monitored_points {points:?} must be increasing hidden-layer indices")));
            }
        }
        let monitored = self.monitored_points.as_ref().map_or(relus, Vec::len);
        if self.gamma > 0.0 && monitored < 2 {
            return Err(Error::Config("the regularizer needs at least 2 monitored points".into()));
        }
        match self.dataset {
            DatasetKind::Idx => {
                if [&self.train_images, &self.train_labels, &self.test_images, &self.test_labels]
                    .iter()
                    .any(|p| p.is_none())
                {
                    return Err(Error::Config("idx datasets need train/test image and label paths".into()));
                }
            }
            DatasetKind::Cifar => {
                if self.cifar_train.is_empty() || self.cifar_test.is_empty() {
                    return Err(Error::Config("cifar datasets need cifar_train and cifar_test files".into()));
                }
            }
            DatasetKind::Synthetic => {}
        }
        Ok(())
    }

    /// Train and test splits after subsetting.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self.dataset {
            DatasetKind::Synthetic => {
                let n_train = self.train_subset.unwrap_or(2000);
                let n_test = self.test_subset.unwrap_or(1000);
                (
                    data::synthetic(&self.synthetic, n_train, 0, self.seed)?,
                    data::synthetic(&self.synthetic, n_test, n_train, self.seed)?,
                )
            }
            DatasetKind::Idx => {
                let p = |o: &Option<PathBuf>| o.clone().ok_or_else(|| Error::Config("missing idx path".into()));
                (
                    data::load_idx(p(&self.train_images)?, p(&self.train_labels)?)?,
                    data::load_idx(p(&self.test_images)?, p(&self.test_labels)?)?,
                )
            }
            DatasetKind::Cifar => (data::load_cifar_bin(&self.cifar_train)?, data::load_cifar_bin(&self.cifar_test)?),
        };
        let train = self.train_subset.map_or(train.clone(), |n| train.subset(n));
        let test = self.test_subset.map_or(test.clone(), |n| test.subset(n));
        Ok((train, test))
    }

    fn model_spec(&self, train: &Dataset) -> Result<ModelSpec> {
        Ok(ModelSpec {
            input_shape: train.image_shape().to_vec(),
            hidden: self.hidden_layers()?,
            num_classes: train.num_classes(),
            renormalize_conv: self.renormalize_conv,
        })
    }

    fn apply_monitoring(&self, model: &mut NetworkModel<f32>) -> Result<()> {
        if let Some(points) = &self.monitored_points {
            model.set_monitored_points(points.clone())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Cross-entropy over the whole training split at the end of the epoch.
    pub cce: f64,
    /// `λ · ½‖θ‖²` at the end of the epoch.
    pub weight_decay: f64,
    /// Mean `γ^m Δ` over the epoch's batches.
    pub regularizer: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessRow {
    pub epoch: usize,
    pub layer_index: usize,
    pub power_m: u32,
    pub class_id: usize,
    pub smoothness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub config: TrainConfig,
    /// Entry 0 describes the untrained model.
    pub epochs: Vec<EpochMetrics>,
    /// One row per trained epoch, monitored point and class.
    pub smoothness: Vec<SmoothnessRow>,
    /// Mean consecutive smoothness gap per trained epoch.
    pub mean_gaps: Vec<f64>,
}

impl Metrics {
    pub fn final_test_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.test_accuracy)
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: NetworkModel<f32>,
    pub stats: NormStats,
    pub metrics: Metrics,
    /// Smoothness profile of the final model.
    pub profile: SmoothnessProfile,
}

/// Mean cross-entropy over a normalized split.
pub fn evaluate_cce(model: &NetworkModel<f32>, images: &DenseTensor<f32>, labels: &[usize]) -> Result<f64> {
    let losses = robustness::map_chunks(images, |chunk, start| {
        let logits = forward(model, &chunk)?;
        let (loss, _) = softmax_cross_entropy(&logits, &labels[start..start + chunk.outer()])?;
        Ok(vec![(loss, chunk.outer())])
    })?;
    let n: usize = losses.iter().map(|l| l.1).sum();
    Ok(losses.iter().map(|(l, c)| l * *c as f64).sum::<f64>() / n.max(1) as f64)
}

/// Mean smoothness profile over the first `batches` consecutive batches of
/// `batch_size` examples.
pub fn smoothness_profile(
    model: &NetworkModel<f32>,
    images: &DenseTensor<f32>,
    labels: &[usize],
    num_classes: usize,
    cfg: &TrainConfig,
) -> Result<SmoothnessProfile> {
    let b = cfg.batch_size.max(2);
    let n = images.outer();
    let profiles: Vec<SmoothnessProfile> = (0..cfg.profile_batches.max(1))
        .map(|i| i * b)
        .filter(|&s| s + 2 <= n)
        .map(|s| {
            let e = (s + b).min(n);
            let trace = forward_with_trace(model, &images.slice_outer(s, e))?;
            SmoothnessProfile::from_representations(
                &trace.representations(),
                trace.monitored_layers(),
                &labels[s..e],
                num_classes,
                cfg.power_m,
                cfg.regularizer().graph_options(),
            )
        })
        .collect::<Result<_>>()?;
    SmoothnessProfile::mean(&profiles)
}

/// Trains a model from `cfg` on the given splits.
pub fn train(cfg: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<TrainRun> {
    cfg.validate()?;
    if train.len() < 2 || test.is_empty() {
        return Err(Error::Config("training needs at least 2 training and 1 test example".into()));
    }
    let stats = NormStats::from_training(train)?;
    let x_train = data::normalize(train, &stats)?;
    let x_test = data::normalize(test, &stats)?;
    let mut model = NetworkModel::<f32>::init(&cfg.model_spec(train)?, cfg.seed)?;
    cfg.apply_monitoring(&mut model)?;
    let mut sgd = Sgd::new(&model, cfg.momentum, cfg.weight_decay);
    let reg_cfg = cfg.regularizer();
    let classes = train.num_classes();

    let epoch_summary = |model: &NetworkModel<f32>, epoch: usize, lr: f64, regularizer: f64| -> Result<EpochMetrics> {
        let preds = robustness::predict(model, &x_test)?;
        Ok(EpochMetrics {
            epoch,
            lr,
            cce: evaluate_cce(model, &x_train, train.labels())?,
            weight_decay: cfg.weight_decay * model.half_squared_norm(),
            regularizer,
            test_accuracy: robustness::accuracy(&preds, test.labels()),
        })
    };

    let mut epochs = vec![epoch_summary(&model, 0, 0.0, 0.0)?];
    let mut smoothness = Vec::new();
    let mut mean_gaps = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut profile = smoothness_profile(&model, &x_test, test.labels(), classes, cfg)?;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut substream(cfg.seed, Stream::Shuffle, epoch as u64));
        let mut reg_total = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let x = x_train.select_outer(idx);
            let y: Vec<usize> = idx.iter().map(|&i| train.labels()[i]).collect();
            let trace = forward_with_trace(&model, &x)?;
            let (_, dlogits) = softmax_cross_entropy(trace.logits(), &y)?;
            let extra = if cfg.gamma > 0.0 && idx.len() >= 2 {
                let signals = make_label_signals(&y, classes)?;
                let out = smoothness_regularizer(&trace, &signals, &reg_cfg)?;
                reg_total += out.value;
                out.grads
            } else {
                Vec::new()
            };
            let grads = backward(&model, &trace, &dlogits, &extra)?;
            sgd.step(&mut model, &grads.params, lr);
            if cfg.parseval {
                apply_parseval(&mut model, cfg.beta)?;
            }
            batches += 1;
        }
        let summary = epoch_summary(&model, epoch + 1, lr, reg_total / batches.max(1) as f64)?;
        if !summary.cce.is_finite() {
            return Err(Error::Degenerate(format!("training diverged in epoch {}", epoch + 1)));
        }
        log::info!(
            "epoch {} lr {} cce {:.4} reg {:.3e} test acc {:.4}",
            summary.epoch,
            lr,
            summary.cce,
            summary.regularizer,
            summary.test_accuracy
        );
        epochs.push(summary);
        profile = smoothness_profile(&model, &x_test, test.labels(), classes, cfg)?;
        for layer in &profile.per_layer {
            for &(class_id, value) in &layer.per_class {
                smoothness.push(SmoothnessRow {
                    epoch: epoch + 1,
                    layer_index: layer.layer_index,
                    power_m: profile.power,
                    class_id,
                    smoothness: value,
                });
            }
        }
        mean_gaps.push(if profile.per_layer.len() >= 2 { profile.mean_gap()? } else { 0.0 });
    }
    Ok(TrainRun { model, stats, metrics: Metrics { config: cfg.clone(), epochs, smoothness, mean_gaps }, profile })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Trains and writes the checkpoint, `metrics.json` and `smoothness.csv` into `out`.
pub fn cmd_train(cfg: &TrainConfig, out: &Path) -> Result<TrainRun> {
    cfg.validate()?;
    let (train_set, test_set) = cfg.load_data()?;
    let run = train(cfg, &train_set, &test_set)?;
    fs::create_dir_all(out)?;
    let mut w = create(&out.join(CHECKPOINT_FILE))?;
    write_checkpoint(&run.model, &mut w)?;
    w.flush()?;
    fs::write(out.join(METRICS_FILE), serde_json::to_string_pretty(&run.metrics)?)?;
    let mut csv = create(&out.join(SMOOTHNESS_CSV))?;
    writeln!(csv, "{}", SmoothnessProfile::csv_header())?;
    for r in &run.metrics.smoothness {
        writeln!(csv, "{},{},{},{},{}", r.epoch, r.layer_index, r.power_m, r.class_id, crate::matrix::format_sig17(r.smoothness))?;
    }
    csv.flush()?;
    Ok(run)
}

pub fn load_model(cfg: &TrainConfig, checkpoint: &Path) -> Result<NetworkModel<f32>> {
    let mut model: NetworkModel<f32> = read_checkpoint(File::open(checkpoint)?)?;
    cfg.apply_monitoring(&mut model)?;
    Ok(model)
}

/// Evaluates `attacks × seeds` on the test split.
pub fn evaluate(
    model: &NetworkModel<f32>,
    cfg: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    attacks: &[AttackKind],
    seeds: &[u64],
) -> Result<AttackReport> {
    let stats = NormStats::from_training(train_set)?;
    let images = data::normalize(test_set, &stats)?;
    if images.shape()[1..] != *model.input_shape() {
        return Err(Error::Shape(format!("checkpoint expects {:?}, data is {:?}", model.input_shape(), &images.shape()[1..])));
    }
    let set = EvalSet { images: &images, labels: test_set.labels(), stats: &stats };
    let mut report = AttackReport::new();
    for attack in attacks {
        for &seed in seeds {
            report.extend(robustness::run_attack(model, set, attack, seed)?)?;
        }
    }
    log::debug!("evaluated {} records with config seed {}", report.records().len(), cfg.seed);
    Ok(report)
}

/// Loads a checkpoint, evaluates and writes `report.json` into `out`.
pub fn cmd_eval(cfg: &TrainConfig, checkpoint: &Path, attacks: &[AttackKind], seeds: &[u64], out: &Path) -> Result<AttackReport> {
    if attacks.is_empty() || seeds.is_empty() {
        return Err(Error::Config("at least one attack and one seed are required".into()));
    }
    let model = load_model(cfg, checkpoint)?;
    let (train_set, test_set) = cfg.load_data()?;
    let report = evaluate(&model, cfg, &train_set, &test_set, attacks, seeds)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(REPORT_FILE), report.to_json()?)?;
    Ok(report)
}

/// Files written by [`cmd_inspect`].
#[derive(Debug, Clone, Default)]
pub struct InspectOutput {
    pub laplacians: Vec<PathBuf>,
    pub powers: Vec<PathBuf>,
    pub smoothness: PathBuf,
    /// Original test indices in the exported (class-contiguous) order.
    pub order: Vec<usize>,
}

/// Positions `0..n` sorted by `(label, position)`.
pub fn class_contiguous_order(labels: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| (labels[i], i));
    order
}

/// Exports per-layer `L` and normalized `L^m` for test batch `batch` (sorted
/// by class), plus smoothness against depth.
pub fn cmd_inspect(cfg: &TrainConfig, checkpoint: &Path, batch: usize, power: u32, out: &Path) -> Result<InspectOutput> {
    let model = load_model(cfg, checkpoint)?;
    let (train_set, test_set) = cfg.load_data()?;
    let stats = NormStats::from_training(&train_set)?;
    let b = cfg.batch_size;
    let start = batch * b;
    if start + 2 > test_set.len() {
        return Err(Error::Config(format!("test batch {batch} of size {b} is out of range")));
    }
    let end = (start + b).min(test_set.len());
    let local = class_contiguous_order(&test_set.labels()[start..end]);
    let order: Vec<usize> = local.iter().map(|&i| start + i).collect();
    let subset = test_set.select(&order);
    let x = data::normalize(&subset, &stats)?;
    let trace = forward_with_trace(&model, &x)?;
    let opts = GraphOptions { k: cfg.k, clamp_negative: cfg.clamp_negative_similarities };
    fs::create_dir_all(out)?;
    let mut result = InspectOutput { order, ..Default::default() };
    for (rep, &layer) in trace.representations().iter().zip(trace.monitored_layers()) {
        let bg = graph::batch_graph(rep, opts)?;
        let lp = graph::laplacian_power_normalized(bg.graph.laplacian(), power)?;
        let lpath = out.join(format!("laplacian_layer{layer}.csv"));
        let mut w = create(&lpath)?;
        bg.graph.laplacian().write_csv(&mut w)?;
        w.flush()?;
        let ppath = out.join(format!("laplacian_pow{power}_layer{layer}.csv"));
        let mut w = create(&ppath)?;
        lp.matrix.write_csv(&mut w)?;
        w.flush()?;
        result.laplacians.push(lpath);
        result.powers.push(ppath);
    }
    let profile = SmoothnessProfile::from_representations(
        &trace.representations(),
        trace.monitored_layers(),
        subset.labels(),
        subset.num_classes(),
        power,
        opts,
    )?;
    result.smoothness = out.join("smoothness_vs_depth.csv");
    let mut w = create(&result.smoothness)?;
    writeln!(w, "{}", SmoothnessProfile::csv_header())?;
    profile.write_csv_rows(0, &mut w)?;
    w.flush()?;
    Ok(result)
}
