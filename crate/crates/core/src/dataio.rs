//! Dataset ingestion and deterministic batching.
//!
//! MNIST comes from the four IDX files (big-endian magic 2051 for images,
//! 2049 for labels); CIFAR-10 from binary batches of 3073-byte records
//! (1 label byte + 3072 CHW pixel bytes). Loaders validate magics and
//! lengths and fail without producing a partial dataset. Nothing here
//! touches the network; `scripts/fetch_mnist.sh` documents how to obtain
//! the files.

use crate::error::{Error, Result};
use crate::tensor::{Real, Rng, Tensor};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images in `[N, C, H, W]` with values in [0, 1] until normalized.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> Vec<usize> {
        self.images.shape()[1..].to_vec()
    }

    /// Copy the given examples into a batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.sample_shape().iter().product::<usize>();
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape());
        let mut out = Tensor::zeros(&shape);
        for (row, &i) in indices.iter().enumerate() {
            out.data_mut()[row * per..(row + 1) * per]
                .copy_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (out, labels)
    }

    /// Keep the first `per_class` examples of every class, preserving order.
    pub fn subset_per_class(&self, per_class: usize) -> Dataset {
        let mut counts = vec![0usize; self.num_classes];
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = self.labels[i];
                if counts[c] < per_class {
                    counts[c] += 1;
                    true
                } else {
                    false
                }
            })
            .collect();
        let (images, labels) = self.gather(&keep);
        Dataset {
            images,
            labels,
            num_classes: self.num_classes,
            split: self.split,
        }
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: offset as u64,
            detail: format!("truncated while reading {what}"),
        })
}

fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let magic = read_u32_be(&bytes, 0, "image magic")?;
    if magic != 2051 {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad IDX image magic {magic}, expected 2051 ({})", path.display()),
        });
    }
    let n = read_u32_be(&bytes, 4, "image count")? as usize;
    let h = read_u32_be(&bytes, 8, "image rows")? as usize;
    let w = read_u32_be(&bytes, 12, "image cols")? as usize;
    let want = 16 + n * h * w;
    if bytes.len() != want {
        return Err(Error::Format {
            offset: bytes.len().min(want) as u64,
            detail: format!("IDX image file is {} bytes, expected {want}", bytes.len()),
        });
    }
    Ok((n, h, w, bytes[16..].to_vec()))
}

fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    let magic = read_u32_be(&bytes, 0, "label magic")?;
    if magic != 2049 {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad IDX label magic {magic}, expected 2049 ({})", path.display()),
        });
    }
    let n = read_u32_be(&bytes, 4, "label count")? as usize;
    let want = 8 + n;
    if bytes.len() != want {
        return Err(Error::Format {
            offset: bytes.len().min(want) as u64,
            detail: format!("IDX label file is {} bytes, expected {want}", bytes.len()),
        });
    }
    Ok(bytes[8..].to_vec())
}

/// Load an MNIST split from `dir` (expects the standard four file names).
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let (n, h, w, pixels) = read_idx_images(&dir.join(format!("{prefix}-images-idx3-ubyte")))?;
    let labels_raw = read_idx_labels(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
    if labels_raw.len() != n {
        return Err(Error::Format {
            offset: 8,
            detail: format!("{n} images but {} labels", labels_raw.len()),
        });
    }
    let mut images = Tensor::zeros(&[n, 1, h, w]);
    for (dst, &src) in images.data_mut().iter_mut().zip(&pixels) {
        *dst = src as Real / 255.0;
    }
    let labels: Vec<usize> = labels_raw.iter().map(|&b| b as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&c| c >= 10) {
        return Err(Error::Format {
            offset: 8,
            detail: format!("MNIST label {bad} out of range"),
        });
    }
    Ok(Dataset {
        images,
        labels,
        num_classes: 10,
        split,
    })
}

const CIFAR_RECORD: usize = 3073; // 1 label + 3*32*32 pixels, CHW

fn read_cifar_batch(path: &Path, images: &mut Vec<Real>, labels: &mut Vec<usize>) -> Result<()> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format {
            offset: (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64,
            detail: format!(
                "{} is {} bytes, not a multiple of {CIFAR_RECORD}",
                path.display(),
                bytes.len()
            ),
        });
    }
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::Format {
                offset: (labels.len() * CIFAR_RECORD) as u64,
                detail: format!("CIFAR-10 label {label} out of range"),
            });
        }
        labels.push(label);
        images.extend(rec[1..].iter().map(|&b| b as Real / 255.0));
    }
    Ok(())
}

/// Load a CIFAR-10 split from `dir` (expects `data_batch_1..5.bin` /
/// `test_batch.bin`).
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".to_string()],
    };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        read_cifar_batch(&dir.join(f), &mut pixels, &mut labels)?;
    }
    let n = labels.len();
    Ok(Dataset {
        images: Tensor::from_vec(&[n, 3, 32, 32], pixels)?,
        labels,
        num_classes: 10,
        split,
    })
}

/// Per-channel standardization: `(x - mean) / std`.
pub fn normalize(ds: &mut Dataset, mean: &[f64], std: &[f64]) -> Result<()> {
    let c = ds.sample_shape()[0];
    if mean.len() != c || std.len() != c {
        return Err(Error::InvalidParameter(format!(
            "{c}-channel data, got {} means / {} stds",
            mean.len(),
            std.len()
        )));
    }
    if let Some(z) = std.iter().find(|&&s| s == 0.0) {
        return Err(Error::InvalidParameter(format!("std must be nonzero, got {z}")));
    }
    let per = ds.sample_shape()[1..].iter().product::<usize>();
    let n = ds.len();
    for i in 0..n {
        for ci in 0..c {
            let base = (i * c + ci) * per;
            let (m, s) = (mean[ci] as Real, std[ci] as Real);
            for v in &mut ds.images.data_mut()[base..base + per] {
                *v = (*v - m) / s;
            }
        }
    }
    Ok(())
}

/// Training-time augmentation: horizontal flip and zero-padded random crop
/// back to the native size. The test split gets normalization only.
#[derive(Debug, Clone, Copy)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    /// Padding before the random crop; 0 disables cropping.
    pub crop_pad: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip_prob: 0.5,
            crop_pad: 4,
        }
    }
}

/// Augment a batch in place, drawing per-image decisions from `rng` in
/// index order (deterministic under a fixed seed).
pub fn augment(batch: &mut Tensor, cfg: &AugmentConfig, rng: &mut Rng) -> Result<()> {
    let shape = batch.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(
            "augment",
            format!("expected [B,C,H,W], got {:?}", shape),
        ));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let pad = cfg.crop_pad;
    let mut scratch = vec![0.0 as Real; c * h * w];
    for bi in 0..b {
        let flip = cfg.hflip_prob > 0.0 && rng.bernoulli(cfg.hflip_prob);
        let (dy, dx) = if pad > 0 {
            (rng.below(2 * pad + 1), rng.below(2 * pad + 1))
        } else {
            (0, 0)
        };
        if !flip && pad == 0 {
            continue;
        }
        let img = &mut batch.data_mut()[bi * c * h * w..(bi + 1) * c * h * w];
        scratch.copy_from_slice(img);
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    // Source position in the padded image, then shifted by
                    // the crop offset; zeros outside.
                    let src_i = i as isize + dy as isize - pad as isize;
                    let src_j = j as isize + dx as isize - pad as isize;
                    let src_j = if flip { w as isize - 1 - src_j } else { src_j };
                    img[(ci * h + i) * w + j] = if src_i >= 0
                        && (src_i as usize) < h
                        && src_j >= 0
                        && (src_j as usize) < w
                    {
                        scratch[(ci * h + src_i as usize) * w + src_j as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
    Ok(())
}

/// Shuffled batch index lists covering every example exactly once; the
/// final batch may be smaller.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// One-hot encode labels as a `[B, classes]` tensor.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &c) in labels.iter().enumerate() {
        t.data_mut()[i * classes + c] = 1.0;
    }
    t
}
