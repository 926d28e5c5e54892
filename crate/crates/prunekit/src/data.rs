//! Dataset provisioning: a seeded synthetic classification task, an
//! IDX-format reader/writer, and the train/validation split.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Image classification dataset: images `[n, c, H, W]` with pixels in
/// `[0, 1]` and one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

/// Deterministic train/validation partition of a dataset. The original row
/// indices are kept so callers can audit the partition.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub validation: Dataset,
    pub fraction: f64,
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
}

impl Dataset {
    pub fn from_parts(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Dataset(format!(
                "images must be [n, c, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|l| **l >= class_count) {
            return Err(Error::Dataset(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copy of image `i` as a `[c, H, W]` tensor.
    pub fn sample(&self, i: usize) -> Tensor {
        let shape = self.images.shape();
        let (c, h, w) = (shape[1], shape[2], shape[3]);
        let stride = c * h * w;
        Tensor::from_vec(
            &[c, h, w],
            self.images.data()[i * stride..(i + 1) * stride].to_vec(),
        )
        .expect("sample slice matches shape")
    }

    /// Dataset restricted to `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let shape = self.images.shape();
        let stride = shape[1] * shape[2] * shape[3];
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        Dataset {
            images: Tensor::from_vec(&[indices.len(), shape[1], shape[2], shape[3]], data)
                .expect("subset shape"),
            labels,
            class_count: self.class_count,
        }
    }
}

/// Base pattern drawn for a class. The four base shapes cycle; classes
/// beyond the first four redraw a shape in a shifted box so every class
/// keeps a distinct pixel support.
///
/// Every class is scaled to the same total brightness afterwards, so mean
/// image brightness carries no label information and classification has to
/// rely on spatial structure. Without that normalization a single averaging
/// filter solves the task and pruning never hurts.
fn draw_pattern(pixels: &mut [f32], size: usize, class: usize) {
    let (lo, hi) = match class / 4 {
        0 => (2, size - 3),
        1 => (1, size / 2),
        _ => (size / 2 - 1, size - 2),
    };
    debug_assert!(lo < hi && hi < size);
    let mut set = |y: usize, x: usize| pixels[y * size + x] = 1.0;
    match class % 4 {
        // filled square
        0 => {
            for y in lo..=hi {
                for x in lo..=hi {
                    set(y, x);
                }
            }
        }
        // hollow square
        1 => {
            for i in lo..=hi {
                set(lo, i);
                set(hi, i);
                set(i, lo);
                set(i, hi);
            }
        }
        // diagonal stripe, single pixel wide
        2 => {
            for i in lo..=hi {
                set(i, i);
            }
        }
        // cross
        3 => {
            let mid = (lo + hi) / 2;
            for i in lo..=hi {
                set(i, mid);
                set(mid, i);
            }
        }
        _ => unreachable!(),
    }
}

/// Seeded synthetic task: one geometric pattern per class plus additive
/// uniform noise of amplitude 0.1, clamped back to `[0, 1]`. Labels cycle
/// `i % classes`, so every class appears whenever `n >= classes`.
pub fn make_synthetic(seed: u64, n: usize, classes: usize, size: usize) -> Result<Dataset> {
    if !(2..=10).contains(&classes) {
        return Err(Error::Dataset(format!(
            "class count {classes} outside supported range 2..=10"
        )));
    }
    if size < 8 {
        return Err(Error::Dataset(format!("image size {size} below minimum 8")));
    }
    if n < classes {
        return Err(Error::Dataset(format!(
            "{n} samples cannot cover {classes} classes"
        )));
    }
    let mut rng = rng::rng_from(seed);
    let mut data = vec![0.0f32; n * size * size];
    let mut labels = Vec::with_capacity(n);
    // Shared per-image brightness budget: every class's support sums to
    // this, whatever its pixel count.
    let budget = (size * size) as f32 / 80.0;
    for i in 0..n {
        let class = i % classes;
        labels.push(class);
        let pixels = &mut data[i * size * size..(i + 1) * size * size];
        draw_pattern(pixels, size, class);
        let support: f32 = pixels.iter().sum();
        let intensity = (budget / support).min(0.9);
        for p in pixels.iter_mut() {
            *p = (*p * intensity + rng.gen_range(-0.1f32..0.1f32)).clamp(0.0, 1.0);
        }
    }
    Dataset::from_parts(
        Tensor::from_vec(&[n, 1, size, size], data)?,
        labels,
        classes,
    )
}

fn read_u32_be(reader: &mut impl Read, path: &str, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf).map_err(|e| Error::IdxTruncated {
        path: path.to_string(),
        detail: format!("while reading {what}: {e}"),
    })?;
    Ok(u32::from_be_bytes(buf))
}

/// Reads an IDX image/label file pair (big-endian headers, u8 payloads).
/// Pixels are scaled to `[0, 1]`; the class count is `max(label) + 1`.
pub fn read_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let ipath = images_path.display().to_string();
    let mut ir = BufReader::new(File::open(images_path)?);
    let magic = read_u32_be(&mut ir, &ipath, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxBadMagic {
            path: ipath,
            expected: IDX_IMAGES_MAGIC,
            got: magic,
        });
    }
    let n = read_u32_be(&mut ir, &ipath, "image count")? as usize;
    let rows = read_u32_be(&mut ir, &ipath, "row count")? as usize;
    let cols = read_u32_be(&mut ir, &ipath, "column count")? as usize;
    let mut pixels = vec![0u8; n * rows * cols];
    ir.read_exact(&mut pixels).map_err(|e| Error::IdxTruncated {
        path: ipath.clone(),
        detail: format!("expected {} pixel bytes: {e}", pixels.len()),
    })?;

    let lpath = labels_path.display().to_string();
    let mut lr = BufReader::new(File::open(labels_path)?);
    let magic = read_u32_be(&mut lr, &lpath, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxBadMagic {
            path: lpath,
            expected: IDX_LABELS_MAGIC,
            got: magic,
        });
    }
    let ln = read_u32_be(&mut lr, &lpath, "label count")? as usize;
    if ln != n {
        return Err(Error::IdxCountMismatch {
            images: n,
            labels: ln,
        });
    }
    let mut labels = vec![0u8; ln];
    lr.read_exact(&mut labels).map_err(|e| Error::IdxTruncated {
        path: lpath,
        detail: format!("expected {ln} label bytes: {e}"),
    })?;

    let data: Vec<f32> = pixels.iter().map(|p| *p as f32 / 255.0).collect();
    let labels: Vec<usize> = labels.iter().map(|l| *l as usize).collect();
    let class_count = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::from_parts(
        Tensor::from_vec(&[n, 1, rows, cols], data)?,
        labels,
        class_count,
    )
}

/// Writes a single-channel dataset as an IDX pair, quantizing pixels to u8
/// with round-to-nearest. Round-tripping twice is pixel-exact.
pub fn write_idx(data: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let shape = data.images.shape();
    if shape[1] != 1 {
        return Err(Error::Dataset(format!(
            "IDX export supports single-channel images, got {} channels",
            shape[1]
        )));
    }
    let (n, rows, cols) = (shape[0], shape[2], shape[3]);
    let mut iw = BufWriter::new(File::create(images_path)?);
    iw.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    iw.write_all(&(n as u32).to_be_bytes())?;
    iw.write_all(&(rows as u32).to_be_bytes())?;
    iw.write_all(&(cols as u32).to_be_bytes())?;
    let bytes: Vec<u8> = data
        .images
        .data()
        .iter()
        .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    iw.write_all(&bytes)?;
    iw.flush()?;

    let mut lw = BufWriter::new(File::create(labels_path)?);
    lw.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    lw.write_all(&(n as u32).to_be_bytes())?;
    let labels: Vec<u8> = data.labels.iter().map(|l| *l as u8).collect();
    lw.write_all(&labels)?;
    lw.flush()?;
    Ok(())
}

/// Seeded 80/20 split: indices are shuffled once, the first 80% (rounded)
/// become training rows and the rest validation rows.
pub fn split_80_20(data: &Dataset, seed: u64) -> Result<Split> {
    let n = data.len();
    if n < 5 {
        return Err(Error::Dataset(format!(
            "need at least 5 samples to split, got {n}"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = rng::rng_from(seed);
    indices.shuffle(&mut rng);
    let val_n = ((n as f64) * 0.2).round().max(1.0) as usize;
    let (train_idx, val_idx) = indices.split_at(n - val_n);
    Ok(Split {
        train: data.subset(train_idx),
        validation: data.subset(val_idx),
        fraction: 0.2,
        train_indices: train_idx.to_vec(),
        validation_indices: val_idx.to_vec(),
    })
}
