//! Desk-scale datasets: synthetic Gaussian classification, the IDX image
//! format, per-channel standardization, and deterministic epoch planning
//! with equal worker shards.

use crate::linalg::DenseMatrix;
use crate::rng;
use crate::tensor::TensorBuffer;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use std::io::Read;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad magic number {found:#010x} in {path} (expected {expected:#010x})")]
    BadMagic {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("file {path} truncated: wanted {wanted} bytes, had {available}")]
    Truncated {
        path: String,
        wanted: usize,
        available: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid dataset parameters: {0}")]
    InvalidParams(String),
    #[error("global batch {batch} not divisible by {workers} workers")]
    IndivisibleBatch { batch: usize, workers: usize },
    #[error("global batch {batch} exceeds dataset size {n}")]
    BatchTooLarge { batch: usize, n: usize },
}

/// An immutable image-classification dataset: `(N, C, H, W)` reals plus
/// one integer class per sample.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: TensorBuffer,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (C, H, W) of a single sample.
    pub fn sample_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn feature_count(&self) -> usize {
        let (c, h, w) = self.sample_shape();
        c * h * w
    }
}

/// Class-conditional Gaussians with unit within-class standard deviation
/// and pairwise mean separation 3.0 (class means sit on a scaled simplex,
/// so `dims >= classes` is required).
pub fn synth_gaussian_classes(
    classes: usize,
    per_class: usize,
    dims: usize,
    seed: u64,
) -> Result<Dataset, DataError> {
    if classes < 1 || per_class < 1 || dims < 1 {
        return Err(DataError::InvalidParams(
            "classes, per_class, dims must all be >= 1".into(),
        ));
    }
    if dims < classes {
        return Err(DataError::InvalidParams(format!(
            "dims ({dims}) must be >= classes ({classes}) for simplex class means"
        )));
    }
    let n = classes * per_class;
    // ||a e_i - a e_j|| = a sqrt(2) = 3.0
    let scale = 3.0 / 2.0f64.sqrt();
    let mut rng = rng::stream(&[seed, 0x51f7]);
    let mut images = TensorBuffer::zeros(&[n, 1, 1, dims]);
    let mut labels = Vec::with_capacity(n);
    for c in 0..classes {
        for s in 0..per_class {
            let idx = c * per_class + s;
            let row = images.sample_mut(idx);
            for (d, v) in row.iter_mut().enumerate() {
                let noise: f64 = rng.sample(StandardNormal);
                *v = noise + if d == c { scale } else { 0.0 };
            }
            labels.push(c);
        }
    }
    Ok(Dataset {
        images,
        labels,
        class_count: classes,
    })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
    Ok(buf)
}

fn read_u32_be(buf: &[u8], offset: usize, path: &Path) -> Result<u32, DataError> {
    if buf.len() < offset + 4 {
        return Err(DataError::Truncated {
            path: path.display().to_string(),
            wanted: offset + 4,
            available: buf.len(),
        });
    }
    Ok(u32::from_be_bytes([
        buf[offset],
        buf[offset + 1],
        buf[offset + 2],
        buf[offset + 3],
    ]))
}

/// Load an IDX image/label pair (the MNIST container format, big-endian).
/// Pixel bytes are scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let img_buf = read_file(images_path)?;
    let magic = read_u32_be(&img_buf, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.display().to_string(),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let n = read_u32_be(&img_buf, 4, images_path)? as usize;
    let h = read_u32_be(&img_buf, 8, images_path)? as usize;
    let w = read_u32_be(&img_buf, 12, images_path)? as usize;
    let wanted = 16 + n * h * w;
    if img_buf.len() < wanted {
        return Err(DataError::Truncated {
            path: images_path.display().to_string(),
            wanted,
            available: img_buf.len(),
        });
    }

    let lbl_buf = read_file(labels_path)?;
    let magic = read_u32_be(&lbl_buf, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.display().to_string(),
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n_labels = read_u32_be(&lbl_buf, 4, labels_path)? as usize;
    if n_labels != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    let wanted = 8 + n;
    if lbl_buf.len() < wanted {
        return Err(DataError::Truncated {
            path: labels_path.display().to_string(),
            wanted,
            available: lbl_buf.len(),
        });
    }

    let data: Vec<f64> = img_buf[16..16 + n * h * w]
        .iter()
        .map(|b| *b as f64 / 255.0)
        .collect();
    let labels: Vec<usize> = lbl_buf[8..8 + n].iter().map(|b| *b as usize).collect();
    let class_count = labels.iter().copied().max().map_or(1, |m| m + 1);
    Ok(Dataset {
        images: TensorBuffer::from_vec(&[n, 1, h, w], data),
        labels,
        class_count,
    })
}

/// Per-channel mean and standard deviation, computed once on the train
/// split and then frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn channel_stats(ds: &Dataset) -> ChannelStats {
    let (c, h, w) = ds.sample_shape();
    let per_channel = h * w;
    let count = (ds.len() * per_channel) as f64;
    let mut mean = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for i in 0..ds.len() {
        let row = ds.images.sample(i);
        for ch in 0..c {
            for v in &row[ch * per_channel..(ch + 1) * per_channel] {
                mean[ch] += v;
                sq[ch] += v * v;
            }
        }
    }
    for ch in 0..c {
        mean[ch] /= count;
        let var = (sq[ch] / count - mean[ch] * mean[ch]).max(0.0);
        sq[ch] = var.sqrt().max(1e-8);
    }
    ChannelStats { mean, std: sq }
}

pub fn apply_standardize(ds: &mut Dataset, stats: &ChannelStats) {
    let (c, h, w) = ds.sample_shape();
    let per_channel = h * w;
    for i in 0..ds.len() {
        let row = ds.images.sample_mut(i);
        for ch in 0..c {
            for v in &mut row[ch * per_channel..(ch + 1) * per_channel] {
                *v = (*v - stats.mean[ch]) / stats.std[ch];
            }
        }
    }
}

/// Deterministic train/val split: a seeded permutation, tail fraction
/// becomes validation.
pub fn split_train_val(ds: &Dataset, val_fraction: f64, seed: u64) -> (Dataset, Option<Dataset>) {
    if val_fraction <= 0.0 {
        return (ds.clone(), None);
    }
    let n = ds.len();
    let n_val = ((n as f64 * val_fraction) as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(&[seed, 0x3a17]));
    let take = |idx: &[usize]| -> Dataset {
        let (c, h, w) = ds.sample_shape();
        let mut images = TensorBuffer::zeros(&[idx.len(), c, h, w]);
        let mut labels = Vec::with_capacity(idx.len());
        for (k, &i) in idx.iter().enumerate() {
            images.sample_mut(k).copy_from_slice(ds.images.sample(i));
            labels.push(ds.labels[i]);
        }
        Dataset {
            images,
            labels,
            class_count: ds.class_count,
        }
    };
    let train = take(&order[..n - n_val]);
    let val = take(&order[n - n_val..]);
    (train, Some(val))
}

/// One epoch's sample order and shard geometry. The permutation depends
/// only on `(seed, epoch)`, so every worker count sees the same global
/// batches.
#[derive(Debug, Clone)]
pub struct EpochPlan {
    pub permutation: Vec<usize>,
    pub iterations_per_epoch: usize,
    pub global_batch: usize,
    pub workers: usize,
    pub shard_size: usize,
}

pub fn plan_epoch(
    n: usize,
    global_batch: usize,
    workers: usize,
    seed: u64,
    epoch: u64,
) -> Result<EpochPlan, DataError> {
    if workers == 0 || global_batch == 0 {
        return Err(DataError::InvalidParams(
            "workers and global_batch must be >= 1".into(),
        ));
    }
    if global_batch % workers != 0 {
        return Err(DataError::IndivisibleBatch {
            batch: global_batch,
            workers,
        });
    }
    if global_batch > n {
        return Err(DataError::BatchTooLarge {
            batch: global_batch,
            n,
        });
    }
    let mut permutation: Vec<usize> = (0..n).collect();
    permutation.shuffle(&mut rng::stream(&[seed, 0xe90c4 ^ epoch]));
    Ok(EpochPlan {
        permutation,
        iterations_per_epoch: n / global_batch,
        global_batch,
        workers,
        shard_size: global_batch / workers,
    })
}

impl EpochPlan {
    /// Sample indices for worker `w` at iteration `it` within the epoch.
    pub fn shard_indices(&self, it: usize, worker: usize) -> &[usize] {
        let start = it * self.global_batch + worker * self.shard_size;
        &self.permutation[start..start + self.shard_size]
    }

    /// All sample indices of global batch `it`.
    pub fn batch_indices(&self, it: usize) -> &[usize] {
        &self.permutation[it * self.global_batch..(it + 1) * self.global_batch]
    }
}

/// Materialize a batch: inputs `(M, C, H, W)` and one-hot labels.
pub fn make_batch(ds: &Dataset, indices: &[usize]) -> (TensorBuffer, DenseMatrix) {
    let (c, h, w) = ds.sample_shape();
    let mut inputs = TensorBuffer::zeros(&[indices.len(), c, h, w]);
    let mut labels = DenseMatrix::zeros(indices.len(), ds.class_count);
    for (k, &i) in indices.iter().enumerate() {
        inputs.sample_mut(k).copy_from_slice(ds.images.sample(i));
        labels.set(k, ds.labels[i], 1.0);
    }
    (inputs, labels)
}
