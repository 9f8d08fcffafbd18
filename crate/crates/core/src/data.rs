//! Datasets: the CIFAR-10 binary format, synthetic Gaussian blobs, and
//! deterministic minibatching.
//!
//! Images are stored channel-planar (all of channel 0, then channel 1, ...)
//! and row-major within a channel, which is also the CIFAR-10 byte order.
//! A flattened image index is therefore `c * h * w + y * w + x`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::nn::InputShape;
use crate::{rng, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    shape: InputShape,
    classes: usize,
    split: Split,
    images: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        shape: InputShape,
        classes: usize,
        split: Split,
        images: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let len = shape.len();
        if len == 0 || classes == 0 {
            return Err(Error::invalid("dataset needs a non-empty shape and at least one class"));
        }
        if images.len() != labels.len() * len {
            return Err(Error::invalid(format!(
                "{} image values for {} labels of size {len}",
                images.len(),
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::invalid(format!("label {l} at example {i} is not below {classes}")));
        }
        if images.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains non-finite pixel values"));
        }
        Ok(Self {
            shape,
            classes,
            split,
            images,
            labels,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> InputShape {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let len = self.shape.len();
        &self.images[i * len..(i + 1) * len]
    }

    /// Copies the given examples into one batch.
    pub fn gather(&self, indices: &[usize]) -> Batch {
        let len = self.shape.len();
        let mut inputs = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend(self.image(i).iter().map(|&v| v as f64));
            labels.push(self.labels[i]);
        }
        Batch { inputs, labels }
    }

    /// Keeps the examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let batch = self.gather(indices);
        Dataset {
            shape: self.shape,
            classes: self.classes,
            split: self.split,
            images: batch.inputs.iter().map(|&v| v as f32).collect(),
            labels: batch.labels,
        }
    }
}

/// A train/test pair.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

/// A gathered minibatch in `f64`, example-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Shuffled minibatches for one epoch. The last partial batch is kept.
pub fn batches(ds: &Dataset, batch_size: usize, epoch_seed: u64) -> Batches<'_> {
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng::seeded(epoch_seed));
    Batches {
        ds,
        order,
        batch_size: batch_size.max(1),
        pos: 0,
    }
}

pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Batches<'_> {
    /// The example order for this epoch.
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.ds.gather(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

/// Parameters of the synthetic Gaussian-blob task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub classes: usize,
    pub per_class: usize,
    pub input_shape: InputShape,
    /// Trailing coordinates that carry no class information.
    pub noise_dims: usize,
    /// Distance between class means, in units of the per-coordinate noise std.
    #[serde(default = "default_separation")]
    pub separation: f64,
    pub seed: u64,
}

fn default_separation() -> f64 {
    6.0
}

/// Class-conditional Gaussian blobs.
///
/// Class means are `separation / √2` times independent random unit vectors
/// supported on the first `dim − noise_dims` coordinates, so two means sit
/// roughly `separation` apart. Every coordinate gets unit Gaussian noise. The
/// first 80% of each class (rounded, at least one example on each side) goes
/// to the training split.
pub fn synthetic_blobs(spec: &BlobSpec) -> Result<Splits> {
    let dim = spec.input_shape.len();
    if spec.classes == 0 || dim == 0 || spec.noise_dims > dim {
        return Err(Error::invalid(format!(
            "degenerate blob shape: {} classes, dim {dim}, {} noise dims",
            spec.classes, spec.noise_dims
        )));
    }
    if spec.per_class < 2 {
        return Err(Error::invalid("synthetic_blobs needs at least 2 examples per class"));
    }
    if !(spec.separation.is_finite() && spec.separation >= 0.0) {
        return Err(Error::invalid("separation must be finite and non-negative"));
    }
    let signal = dim - spec.noise_dims;
    let mut rng = rng::seeded(spec.seed);
    let radius = spec.separation / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let mut m: Vec<f64> = (0..signal).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                m.iter_mut().for_each(|v| *v *= radius / norm);
            }
            m
        })
        .collect();

    let n_train = ((spec.per_class as f64 * 0.8).round() as usize).clamp(1, spec.per_class - 1);
    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    for i in 0..spec.per_class {
        for (class, mean) in means.iter().enumerate() {
            let dst = if i < n_train { &mut train } else { &mut test };
            for j in 0..dim {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let mu = if j < signal { mean[j] } else { 0.0 };
                dst.0.push((mu + noise) as f32);
            }
            dst.1.push(class);
        }
    }
    Ok(Splits {
        train: Dataset::new(spec.input_shape, spec.classes, Split::Train, train.0, train.1)?,
        test: Dataset::new(spec.input_shape, spec.classes, Split::Test, test.0, test.1)?,
    })
}

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_PIXELS: usize = CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORD_BYTES: usize = 1 + CIFAR_PIXELS;
pub const CIFAR_RECORDS_PER_BATCH: usize = 10_000;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// One raw CIFAR-10 record: a label byte and 3072 channel-planar pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CifarRecord {
    pub label: u8,
    pub pixels: Vec<u8>,
}

impl CifarRecord {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CIFAR_RECORD_BYTES);
        out.push(self.label);
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Per-channel standardization constants, computed on pixels scaled to [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn fit(records: &[CifarRecord]) -> Self {
        let plane = CIFAR_SIDE * CIFAR_SIDE;
        let mut sum = [0.0f64; CIFAR_CHANNELS];
        let mut sum_sq = [0.0f64; CIFAR_CHANNELS];
        for r in records {
            for c in 0..CIFAR_CHANNELS {
                for &p in &r.pixels[c * plane..(c + 1) * plane] {
                    let v = p as f64 / 255.0;
                    sum[c] += v;
                    sum_sq[c] += v * v;
                }
            }
        }
        let n = (records.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sum_sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n - m * m).max(0.0);
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    fn apply(&self, records: &[CifarRecord], split: Split) -> Result<Dataset> {
        let plane = CIFAR_SIDE * CIFAR_SIDE;
        let mut images = Vec::with_capacity(records.len() * CIFAR_PIXELS);
        let mut labels = Vec::with_capacity(records.len());
        for r in records {
            for (i, &p) in r.pixels.iter().enumerate() {
                let c = i / plane;
                images.push(((p as f64 / 255.0 - self.mean[c]) / self.std[c]) as f32);
            }
            labels.push(r.label as usize);
        }
        Dataset::new(cifar_shape(), CIFAR_CLASSES, split, images, labels)
    }
}

pub fn cifar_shape() -> InputShape {
    InputShape {
        height: CIFAR_SIDE,
        width: CIFAR_SIDE,
        channels: CIFAR_CHANNELS,
    }
}

/// Parses one CIFAR-10 batch file's bytes. `path` is only used in errors.
pub fn parse_cifar_batch(bytes: &[u8], path: &Path) -> Result<Vec<CifarRecord>> {
    parse_batch_with(bytes, path, CIFAR_RECORDS_PER_BATCH)
}

fn parse_batch_with(bytes: &[u8], path: &Path, records: usize) -> Result<Vec<CifarRecord>> {
    let expected = records * CIFAR_RECORD_BYTES;
    if bytes.len() != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len().min(expected) as u64,
            message: format!("file has {} bytes, expected {expected}", bytes.len()),
        });
    }
    bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            if rec[0] as usize >= CIFAR_CLASSES {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: (i * CIFAR_RECORD_BYTES) as u64,
                    message: format!("label byte {} is not a CIFAR-10 class", rec[0]),
                });
            }
            Ok(CifarRecord {
                label: rec[0],
                pixels: rec[1..].to_vec(),
            })
        })
        .collect()
}

/// The standardized CIFAR-10 splits together with the constants used.
#[derive(Clone, Debug)]
pub struct Cifar10 {
    pub splits: Splits,
    pub normalization: Normalization,
}

/// Loads the binary CIFAR-10 distribution from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<Cifar10> {
    load_cifar10_with(dir, CIFAR_RECORDS_PER_BATCH)
}

fn read_batch(path: PathBuf, records: usize) -> Result<Vec<CifarRecord>> {
    let bytes = fs::read(&path).map_err(|e| Error::Format {
        path: path.clone(),
        offset: 0,
        message: format!("cannot read file: {e}"),
    })?;
    parse_batch_with(&bytes, &path, records)
}

fn load_cifar10_with(dir: &Path, records: usize) -> Result<Cifar10> {
    let mut train = Vec::with_capacity(records * CIFAR_TRAIN_FILES.len());
    for name in CIFAR_TRAIN_FILES {
        train.extend(read_batch(dir.join(name), records)?);
    }
    let test = read_batch(dir.join(CIFAR_TEST_FILE), records)?;
    let normalization = Normalization::fit(&train);
    Ok(Cifar10 {
        splits: Splits {
            train: normalization.apply(&train, Split::Train)?,
            test: normalization.apply(&test, Split::Test)?,
        },
        normalization,
    })
}
