//! Datasets: IDX and CIFAR-10 binary readers, per-channel normalization and a
//! seeded synthetic image set for offline runs.
//!
//! Pixels are stored as `f32` in `[0, 1]` with shape `N×C×H×W`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::tensor::DenseTensor;

/// Lower bound applied to per-channel standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_CLASSES: usize = 10;
const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: DenseTensor<f32>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(images: DenseTensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Shape(format!("images must be N×C×H×W, got {:?}", images.shape())));
        }
        if images.outer() != labels.len() {
            return Err(Error::Shape(format!("{} images but {} labels", images.outer(), labels.len())));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Parameter(format!("label {l} of example {i} outside [0, {num_classes})")));
        }
        Ok(Dataset { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &DenseTensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// The first `n` examples (all of them if `n` exceeds the length).
    pub fn subset(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images.slice_outer(0, n),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_outer(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(bytes.len() as u64, "file ends inside the header"))
}

fn parse_idx<'a>(bytes: &'a [u8], magic: u32, what: &str) -> Result<(Vec<usize>, &'a [u8])> {
    let found = read_u32(bytes, 0)?;
    if found != magic {
        return Err(Error::format(0, format!("{what}: magic {found:#010x}, expected {magic:#010x}")));
    }
    let ndims = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndims);
    for d in 0..ndims {
        let offset = 4 + 4 * d;
        let v = read_u32(bytes, offset)? as usize;
        if v == 0 {
            return Err(Error::format(offset as u64, format!("{what}: dimension {d} is zero")));
        }
        dims.push(v);
    }
    let start = 4 + 4 * ndims;
    let expected: usize = dims.iter().product();
    let body = &bytes[start..];
    if body.len() < expected {
        return Err(Error::format(bytes.len() as u64, format!("{what}: truncated, {} of {expected} data bytes", body.len())));
    }
    if body.len() > expected {
        return Err(Error::format((start + expected) as u64, format!("{what}: trailing bytes after the data")));
    }
    Ok((dims, body))
}

/// Parses an IDX image file (`u8`, `N×H×W`) and its label file.
pub fn parse_idx_pair(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let (dims, pixels) = parse_idx(image_bytes, IDX_IMAGES_MAGIC, "images")?;
    let (ldims, labels) = parse_idx(label_bytes, IDX_LABELS_MAGIC, "labels")?;
    if ldims[0] != dims[0] {
        return Err(Error::format(4, format!("{} labels for {} images", ldims[0], dims[0])));
    }
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    // Digit-style sets have ten classes; larger label values widen the range.
    let num_classes = labels.iter().map(|&l| l + 1).max().unwrap_or(0).max(CIFAR_CLASSES);
    let images = DenseTensor::from_vec(&[dims[0], 1, dims[1], dims[2]], pixels.iter().map(|&p| p as f32 / 255.0).collect())?;
    Dataset::new(images, labels, num_classes)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    parse_idx_pair(&fs::read(images_path)?, &fs::read(labels_path)?)
}

fn pixel_byte(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes single-channel images and labels as an IDX pair.
pub fn write_idx<W1: Write, W2: Write>(dataset: &Dataset, mut images: W1, mut labels: W2) -> Result<()> {
    let shape = dataset.images.shape();
    if shape[1] != 1 {
        return Err(Error::Shape(format!("IDX holds single-channel images, got {} channels", shape[1])));
    }
    if let Some(&l) = dataset.labels.iter().find(|&&l| l > 255) {
        return Err(Error::Parameter(format!("label {l} does not fit in a byte")));
    }
    let mut buf = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
    for d in [shape[0], shape[2], shape[3]] {
        buf.extend_from_slice(&(d as u32).to_be_bytes());
    }
    buf.extend(dataset.images.data().iter().map(|&v| pixel_byte(v)));
    images.write_all(&buf)?;
    let mut buf = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
    buf.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    buf.extend(dataset.labels.iter().map(|&l| l as u8));
    labels.write_all(&buf)?;
    Ok(())
}

/// Parses concatenated CIFAR-10 binary records (1 label byte, 3×32×32 pixels).
pub fn parse_cifar_bin(bytes: &[u8]) -> Result<(Vec<f32>, Vec<usize>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::format(
            (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
            format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(Error::format((r * CIFAR_RECORD) as u64, format!("label byte {} is not below 10", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&p| p as f32 / 255.0));
    }
    Ok((pixels, labels))
}

pub fn load_cifar_bin<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let (p, l) = parse_cifar_bin(&fs::read(path)?)?;
        pixels.extend(p);
        labels.extend(l);
    }
    if labels.is_empty() {
        return Err(Error::format(0, "no CIFAR records found"));
    }
    let images = DenseTensor::from_vec(&[labels.len(), 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?;
    Dataset::new(images, labels, CIFAR_CLASSES)
}

pub fn write_cifar_bin<W: Write>(dataset: &Dataset, mut w: W) -> Result<()> {
    if dataset.image_shape() != [3, CIFAR_SIDE, CIFAR_SIDE] || dataset.num_classes > CIFAR_CLASSES {
        return Err(Error::Shape(format!("not a CIFAR-10 shaped dataset: {:?}", dataset.image_shape())));
    }
    let per = CIFAR_RECORD - 1;
    let mut buf = Vec::with_capacity(dataset.len() * CIFAR_RECORD);
    for (i, &l) in dataset.labels.iter().enumerate() {
        buf.push(l as u8);
        buf.extend(dataset.images.data()[i * per..(i + 1) * per].iter().map(|&v| pixel_byte(v)));
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Per-channel mean and (population) standard deviation of a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn from_training(train: &Dataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Degenerate("cannot compute statistics of an empty split".into()));
        }
        let (c, hw) = (train.image_shape()[0], train.image_shape()[1] * train.image_shape()[2]);
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for img in train.images.data().chunks_exact(c * hw) {
            for ch in 0..c {
                for &v in &img[ch * hw..(ch + 1) * hw] {
                    sum[ch] += v as f64;
                    sq[ch] += v as f64 * v as f64;
                }
            }
        }
        let count = (train.len() * hw) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .enumerate()
            .map(|(ch, (s, m))| {
                let sd = (s / count - m * m).max(0.0).sqrt();
                if sd < STD_FLOOR {
                    log::warn!("channel {ch} has standard deviation {sd:e}; clamped to {STD_FLOOR:e}");
                    STD_FLOOR
                } else {
                    sd
                }
            })
            .collect();
        Ok(NormStats { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn apply(&self, images: &DenseTensor<f32>, f: impl Fn(f64, f64, f64) -> f64) -> Result<DenseTensor<f32>> {
        let c = self.channels();
        if images.shape().len() != 4 || images.shape()[1] != c {
            return Err(Error::Shape(format!("images {:?} for {c}-channel statistics", images.shape())));
        }
        let hw = images.shape()[2] * images.shape()[3];
        let mut out = images.clone();
        for (idx, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (idx / hw) % c;
            *v = f(*v as f64, self.mean[ch], self.std[ch]) as f32;
        }
        Ok(out)
    }

    /// `(x - mean_c) / std_c`.
    pub fn normalize(&self, images: &DenseTensor<f32>) -> Result<DenseTensor<f32>> {
        self.apply(images, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, images: &DenseTensor<f32>) -> Result<DenseTensor<f32>> {
        self.apply(images, |v, m, s| v * s + m)
    }
}

/// Normalizes a dataset's images with statistics from a training split.
pub fn normalize(dataset: &Dataset, stats: &NormStats) -> Result<DenseTensor<f32>> {
    stats.normalize(dataset.images())
}

/// Shape and difficulty of the synthetic image set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub channels: usize,
    pub side: usize,
    pub num_classes: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Maximum absolute translation in pixels.
    pub max_shift: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { channels: 1, side: 12, num_classes: 10, noise: 0.35, max_shift: 2 }
    }
}

/// Seeded set of blurred class prototypes with random shift, contrast and
/// pixel noise. Example `i` draws from its own stream, so a prefix of a larger
/// set equals the smaller set. Examples `offset..offset+n` are generated.
pub fn synthetic(spec: &SyntheticSpec, n: usize, offset: usize, seed: u64) -> Result<Dataset> {
    if spec.channels == 0 || spec.side < 3 || spec.num_classes < 2 || n == 0 {
        return Err(Error::Config(format!("unusable synthetic spec {spec:?} with {n} examples")));
    }
    let (c, side) = (spec.channels, spec.side);
    let plane = side * side;
    let mut rng = substream(seed, Stream::Data, 0);
    let prototypes: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            let mut img = vec![0.0; c * plane];
            for ch in 0..c {
                for _ in 0..3 {
                    let cy = rng.random_range(1.0..side as f64 - 1.0);
                    let cx = rng.random_range(1.0..side as f64 - 1.0);
                    let sigma = rng.random_range(0.1..0.25) * side as f64;
                    let amp = rng.random_range(0.5..1.0);
                    for y in 0..side {
                        for x in 0..side {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            img[ch * plane + y * side + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                        }
                    }
                }
            }
            let max = img.iter().copied().fold(0.0, f64::max).max(1e-12);
            img.iter_mut().for_each(|v| *v /= max);
            img
        })
        .collect();

    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let shift = spec.max_shift as i64;
    let mut pixels = Vec::with_capacity(n * c * plane);
    let mut labels = Vec::with_capacity(n);
    for i in offset..offset + n {
        let mut rng = substream(seed, Stream::Data, 1 + i as u64);
        let label = rng.random_range(0..spec.num_classes);
        let (dy, dx) = (rng.random_range(-shift..=shift), rng.random_range(-shift..=shift));
        let contrast = rng.random_range(0.6..1.0);
        let proto = &prototypes[label];
        for ch in 0..c {
            for y in 0..side as i64 {
                for x in 0..side as i64 {
                    let (sy, sx) = (y - dy, x - dx);
                    let base = if (0..side as i64).contains(&sy) && (0..side as i64).contains(&sx) {
                        proto[ch * plane + sy as usize * side + sx as usize]
                    } else {
                        0.0
                    };
                    let v = contrast * base + noise.sample(&mut rng);
                    pixels.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        labels.push(label);
    }
    Dataset::new(DenseTensor::from_vec(&[n, c, side, side], pixels)?, labels, spec.num_classes)
}
