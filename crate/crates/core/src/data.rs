//! Datasets: synthetic generators, IDX image/label files, splitting,
//! per-channel normalization and seeded mini-batch iteration.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, LoadError, Result};
use crate::tensor::Tensor;

pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;

/// Per-channel statistics. Channel `c` covers the `c`-th contiguous block of
/// each sample (the leading per-sample dim), so for flat feature vectors every
/// feature is its own channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Tensor,
    labels: Vec<usize>,
    classes: usize,
    norm: Option<NormStats>,
}

impl Dataset {
    pub fn new(samples: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if samples.shape().len() < 2 {
            return Err(input_err("samples need a batch dim and a per-sample shape"));
        }
        if samples.batch() != labels.len() {
            return Err(input_err(format!(
                "{} samples but {} labels",
                samples.batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(input_err(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            samples,
            labels,
            classes,
            norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.samples.sample_shape()
    }

    /// Stats applied by [`Dataset::normalized`], if any.
    pub fn norm(&self) -> Option<&NormStats> {
        self.norm.as_ref()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: self.samples.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            norm: self.norm.clone(),
        }
    }

    /// Seeded disjoint train/validation split; `val_fraction` of the samples
    /// (rounded) go to validation.
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(input_err(format!("val_fraction must be in [0, 1), got {val_fraction}")));
        }
        let (train_idx, val_idx) = split_indices(self.len(), val_fraction, seed);
        if train_idx.is_empty() || val_idx.is_empty() {
            return Err(input_err(format!(
                "split of {} samples at {val_fraction} leaves an empty side",
                self.len()
            )));
        }
        Ok((self.subset(&train_idx), self.subset(&val_idx)))
    }

    fn channels(&self) -> (usize, usize) {
        let c = self.sample_shape()[0];
        (c, self.samples.sample_len() / c)
    }

    /// Population mean and std per channel. Constant channels get std 1.
    pub fn fit_normalization(&self) -> NormStats {
        let (channels, block) = self.channels();
        let mut sum = vec![0.0; channels];
        for i in 0..self.len() {
            for (c, chunk) in self.samples.row(i).chunks_exact(block).enumerate() {
                sum[c] += chunk.iter().sum::<f64>();
            }
        }
        let count = (self.len() * block) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let mut sq = vec![0.0; channels];
        for i in 0..self.len() {
            for (c, chunk) in self.samples.row(i).chunks_exact(block).enumerate() {
                sq[c] += chunk.iter().map(|v| (v - mean[c]) * (v - mean[c])).sum::<f64>();
            }
        }
        let std = sq
            .iter()
            .map(|s| {
                let sd = (s / count).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        NormStats { mean, std }
    }

    pub fn normalized(&self, stats: &NormStats) -> Result<Dataset> {
        let (channels, block) = self.channels();
        if stats.mean.len() != channels || stats.std.len() != channels {
            return Err(input_err(format!(
                "normalization stats have {} channels, data has {channels}",
                stats.mean.len()
            )));
        }
        let mut samples = self.samples.clone();
        for i in 0..self.len() {
            for (c, chunk) in samples.row_mut(i).chunks_exact_mut(block).enumerate() {
                for v in chunk {
                    *v = (*v - stats.mean[c]) / stats.std[c];
                }
            }
        }
        Ok(Dataset {
            samples,
            labels: self.labels.clone(),
            classes: self.classes,
            norm: Some(stats.clone()),
        })
    }

    /// Debug export: `label,f0,f1,...` per sample.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        let header: Vec<String> = (0..self.samples.sample_len()).map(|k| format!("f{k}")).collect();
        writeln!(out, "label,{}", header.join(","))?;
        for i in 0..self.len() {
            let row: Vec<String> = self.samples.row(i).iter().map(f64::to_string).collect();
            writeln!(out, "{},{}", self.labels[i], row.join(","))?;
        }
        out.flush()?;
        Ok(())
    }
}

fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_val = (n as f64 * val_fraction).round() as usize;
    let val = idx.split_off(n - n_val);
    (idx, val)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SyntheticKind {
    /// Gaussian clusters around random centroids in `features` dimensions.
    Blobs { features: usize },
    /// Interleaved 2-D spiral arms, one per class.
    Spirals,
    /// `1 x size x size` images: a random binary glyph per class, jittered by
    /// up to two pixels and corrupted with clipped Gaussian pixel noise.
    Glyphs { size: usize },
}

/// Deterministic under `seed`; class counts differ by at most one.
pub fn gen_synthetic(
    kind: SyntheticKind,
    n: usize,
    classes: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || n < classes {
        return Err(input_err(format!("need n >= classes >= 2, got n={n}, classes={classes}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(input_err(format!("noise must be >= 0, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let (shape, values) = match kind {
        SyntheticKind::Blobs { features } => {
            if features == 0 {
                return Err(input_err("blobs need at least one feature"));
            }
            let centroids: Vec<Vec<f64>> = (0..classes)
                .map(|_| (0..features).map(|_| rng.random_range(-5.0..5.0)).collect())
                .collect();
            let mut values = Vec::with_capacity(n * features);
            for &y in &labels {
                for &c in &centroids[y] {
                    values.push(c + noise * gauss(&mut rng));
                }
            }
            (vec![n, features], values)
        }
        SyntheticKind::Spirals => {
            let mut seen = vec![0usize; classes];
            let per_class: Vec<usize> = (0..classes)
                .map(|k| labels.iter().filter(|&&l| l == k).count())
                .collect();
            let mut values = Vec::with_capacity(n * 2);
            for &y in &labels {
                let r = (seen[y] + 1) as f64 / per_class[y] as f64;
                seen[y] += 1;
                let theta = 2.0 * std::f64::consts::PI * y as f64 / classes as f64
                    + 4.0 * r
                    + noise * gauss(&mut rng);
                values.push(r * theta.cos());
                values.push(r * theta.sin());
            }
            (vec![n, 2], values)
        }
        SyntheticKind::Glyphs { size } => {
            if size < 5 {
                return Err(input_err("glyph images need size >= 5"));
            }
            let inner = size - 2;
            let templates: Vec<Vec<bool>> = (0..classes)
                .map(|_| (0..inner * inner).map(|_| rng.random_bool(0.35)).collect())
                .collect();
            let mut values = Vec::with_capacity(n * size * size);
            for &y in &labels {
                let (dy, dx) = (rng.random_range(0..3usize), rng.random_range(0..3usize));
                for i in 0..size {
                    for j in 0..size {
                        let on = i >= dy
                            && j >= dx
                            && i - dy < inner
                            && j - dx < inner
                            && templates[y][(i - dy) * inner + (j - dx)];
                        let base = if on { 1.0 } else { 0.0 };
                        let v: f64 = base + noise * gauss(&mut rng);
                        values.push(v.clamp(0.0, 1.0));
                    }
                }
            }
            (vec![n, 1, size, size], values)
        }
    };
    Dataset::new(Tensor::new(shape, values)?, labels, classes)
}

/// Raw IDX image file contents (`u8` pixels, row-major).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_file(path: &Path) -> Result<Vec<u8>, LoadError> {
    fs::read(path).map_err(|source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, LoadError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| LoadError::Truncated {
            path: path.to_path_buf(),
            needed: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<(), LoadError> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(LoadError::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], start: usize, len: usize, path: &Path) -> Result<&'a [u8], LoadError> {
    bytes.get(start..start + len).ok_or_else(|| LoadError::Truncated {
        path: path.to_path_buf(),
        needed: start + len,
        found: bytes.len(),
    })
}

pub fn read_idx_images(path: &Path) -> Result<IdxImages, LoadError> {
    let bytes = read_file(path)?;
    check_magic(&bytes, IDX_IMAGE_MAGIC, path)?;
    let count = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let pixels = payload(&bytes, 16, count * rows * cols, path)?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>, LoadError> {
    let bytes = read_file(path)?;
    check_magic(&bytes, IDX_LABEL_MAGIC, path)?;
    let count = be_u32(&bytes, 4, path)? as usize;
    Ok(payload(&bytes, 8, count, path)?.to_vec())
}

pub fn write_idx_images(path: &Path, images: &IdxImages) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + images.pixels.len());
    for v in [IDX_IMAGE_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    bytes.extend_from_slice(&images.pixels);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    fs::write(path, bytes)?;
    Ok(())
}

/// Loads an IDX image/label pair as `[N, 1, rows, cols]` samples scaled to
/// `[0, 1]`. The class count is one past the largest label (at least 2).
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = read_idx_images(images)?;
    let lab = read_idx_labels(labels)?;
    if img.count != lab.len() {
        return Err(LoadError::CountMismatch {
            images: img.count,
            labels: lab.len(),
        }
        .into());
    }
    if img.count == 0 || img.rows == 0 || img.cols == 0 {
        return Err(input_err("IDX file holds no pixels"));
    }
    let classes = lab.iter().map(|&l| l as usize + 1).max().unwrap_or(0).max(2);
    let values = img.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let samples = Tensor::new(vec![img.count, 1, img.rows, img.cols], values)?;
    Dataset::new(samples, lab.iter().map(|&l| l as usize).collect(), classes)
}

/// Writes a single-channel image dataset with values in `[0, 1]` as an IDX
/// pair, quantizing pixels to bytes.
pub fn export_idx(ds: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let [1, rows, cols] = *ds.sample_shape() else {
        return Err(input_err(format!(
            "IDX export needs [1, H, W] samples, got {:?}",
            ds.sample_shape()
        )));
    };
    if ds.classes() > 256 {
        return Err(input_err("IDX labels are single bytes"));
    }
    let pixels = ds
        .samples()
        .values()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_idx_images(
        images,
        &IdxImages {
            count: ds.len(),
            rows,
            cols,
            pixels,
        },
    )?;
    let lab: Vec<u8> = ds.labels().iter().map(|&l| l as u8).collect();
    write_idx_labels(labels, &lab)
}

/// Seeded mini-batches over a dataset; the final partial batch is kept.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let x = self.ds.samples.select(idx);
        let y = idx.iter().map(|&i| self.ds.labels[i]).collect();
        Some((x, y))
    }
}

/// Permutation depends only on `(shuffle_seed, epoch)`.
pub fn batches(ds: &Dataset, batch_size: usize, shuffle_seed: u64, epoch: u64) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(input_err("batch_size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(Batches {
        ds,
        order,
        batch_size,
        pos: 0,
    })
}

/// Flips each `[C, H, W]` sample left-right with probability 1/2.
pub fn random_hflip(batch: &mut Tensor, rng: &mut impl Rng) {
    let [_, c, h, w] = *batch.shape() else {
        return;
    };
    for i in 0..batch.batch() {
        if !rng.random_bool(0.5) {
            continue;
        }
        for line in batch.row_mut(i).chunks_exact_mut(w).take(c * h) {
            line.reverse();
        }
    }
}
