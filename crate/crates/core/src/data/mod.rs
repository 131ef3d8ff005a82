//! CIFAR-style binary records, augmentation, channel normalization and
//! deterministic splits.
//!
//! A record is `label_bytes` label bytes (with two, the second is the fine
//! label) followed by 1024 red, 1024 green and 1024 blue bytes, each plane
//! row-major. Pixels are scaled to `[0, 1]` by `byte / 255`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{derive_seed, Element, Tensor};

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_PIXELS: usize = 3 * IMAGE_SIDE * IMAGE_SIDE;
/// Zero border added before the random crop.
pub const CROP_PAD: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `[3, 32, 32]`, values in `[0, 1]` before normalization.
    pub pixels: Tensor<f32>,
    pub label: usize,
    /// First label byte of two-label records (CIFAR-100 coarse class).
    pub coarse_label: Option<u8>,
}

/// Parses concatenated records from memory.
pub fn parse_cifar_records(bytes: &[u8], label_bytes: usize, num_classes: usize) -> Result<Vec<LabeledImage>> {
    if !(1..=2).contains(&label_bytes) {
        return Err(Error::InvalidArgument(format!("label_bytes must be 1 or 2, got {label_bytes}")));
    }
    let record = label_bytes + IMAGE_PIXELS;
    if !bytes.len().is_multiple_of(record) {
        return Err(Error::Format {
            offset: bytes.len() - bytes.len() % record,
            message: format!("truncated record: {} bytes is not a multiple of {record}", bytes.len()),
        });
    }
    bytes
        .chunks_exact(record)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[label_bytes - 1] as usize;
            if label >= num_classes {
                return Err(Error::Format {
                    offset: i * record + label_bytes - 1,
                    message: format!("label {label} out of range for {num_classes} classes"),
                });
            }
            let pixels = rec[label_bytes..].iter().map(|&b| b as f32 / 255.0).collect();
            Ok(LabeledImage {
                pixels: Tensor::from_vec(vec![3, IMAGE_SIDE, IMAGE_SIDE], pixels)?,
                label,
                coarse_label: (label_bytes == 2).then_some(rec[0]),
            })
        })
        .collect()
}

pub fn load_cifar_binary(path: &Path, label_bytes: usize, num_classes: usize) -> Result<Vec<LabeledImage>> {
    let bytes = fs::read(path)?;
    parse_cifar_records(&bytes, label_bytes, num_classes).map_err(|e| match e {
        Error::Format { offset, message } => {
            Error::Format { offset, message: format!("{}: {message}", path.display()) }
        }
        other => other,
    })
}

/// Serializes images back into records; inverse of [`parse_cifar_records`].
pub fn write_cifar_records(images: &[LabeledImage], label_bytes: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(images.len() * (label_bytes + IMAGE_PIXELS));
    for img in images {
        if img.pixels.numel() != IMAGE_PIXELS {
            return Err(Error::InvalidShape(format!("record image must be [3, 32, 32], got {}", img.pixels.shape())));
        }
        let label = u8::try_from(img.label)
            .map_err(|_| Error::InvalidArgument(format!("label {} exceeds a byte", img.label)))?;
        match label_bytes {
            1 => out.push(label),
            2 => out.extend_from_slice(&[img.coarse_label.unwrap_or(0), label]),
            n => return Err(Error::InvalidArgument(format!("label_bytes must be 1 or 2, got {n}"))),
        }
        out.extend(img.pixels.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    Ok(out)
}

/// Supported on-disk layouts of a dataset directory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetFormat {
    /// `data_batch_{1..5}.bin` and `test_batch.bin`, one label byte.
    Cifar10,
    /// `train.bin` and `test.bin`, two label bytes (coarse, fine).
    Cifar100,
    /// `train.bin` and `test.bin` converted to one-label-byte records.
    Svhn,
}

impl std::str::FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(DatasetFormat::Cifar10),
            "cifar100" => Ok(DatasetFormat::Cifar100),
            "svhn" => Ok(DatasetFormat::Svhn),
            _ => Err(Error::InvalidArgument(format!("unknown dataset format `{s}` (cifar10, cifar100, svhn)"))),
        }
    }
}

impl std::fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetFormat::Cifar10 => "cifar10",
            DatasetFormat::Cifar100 => "cifar100",
            DatasetFormat::Svhn => "svhn",
        })
    }
}

impl DatasetFormat {
    pub fn num_classes(self) -> usize {
        match self {
            DatasetFormat::Cifar100 => 100,
            _ => 10,
        }
    }

    pub fn label_bytes(self) -> usize {
        match self {
            DatasetFormat::Cifar100 => 2,
            _ => 1,
        }
    }

    fn train_files(self) -> Vec<String> {
        match self {
            DatasetFormat::Cifar10 => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            _ => vec!["train.bin".into()],
        }
    }

    fn test_file(self) -> &'static str {
        match self {
            DatasetFormat::Cifar10 => "test_batch.bin",
            _ => "test.bin",
        }
    }

    pub fn load_train(self, dir: &Path) -> Result<Vec<LabeledImage>> {
        let mut all = Vec::new();
        for f in self.train_files() {
            all.extend(load_cifar_binary(&dir.join(f), self.label_bytes(), self.num_classes())?);
        }
        Ok(all)
    }

    pub fn load_test(self, dir: &Path) -> Result<Vec<LabeledImage>> {
        load_cifar_binary(&dir.join(self.test_file()), self.label_bytes(), self.num_classes())
    }
}

/// Seeded split into `(train, val)`; both parts keep the input order.
pub fn split_train_val(
    data: Vec<LabeledImage>,
    val_count: usize,
    seed: u64,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    if val_count >= data.len() {
        return Err(Error::InvalidArgument(format!(
            "validation count {val_count} must be smaller than the dataset ({})",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; data.len()];
    for &i in &order[..val_count] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::with_capacity(data.len() - val_count), Vec::with_capacity(val_count));
    for (img, v) in data.into_iter().zip(is_val) {
        if v {
            val.push(img);
        } else {
            train.push(img);
        }
    }
    Ok((train, val))
}

/// One draw of the augmentation: optional mirror, then a crop at
/// `(dy, dx)` of the image zero-padded by [`CROP_PAD`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentParams {
    pub flip: bool,
    pub dy: usize,
    pub dx: usize,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams { flip: false, dy: CROP_PAD, dx: CROP_PAD };

    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        AugmentParams {
            flip: rng.random_bool(0.5),
            dy: rng.random_range(0..=2 * CROP_PAD),
            dx: rng.random_range(0..=2 * CROP_PAD),
        }
    }
}

/// Generator for the augmentation of example `index` in `epoch`. Independent
/// of iteration order.
pub fn example_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, epoch as u64), index as u64))
}

pub fn augment_with(img: &LabeledImage, p: AugmentParams) -> LabeledImage {
    let s = IMAGE_SIDE;
    let src = img.pixels.data();
    let mut out = vec![0.0f32; IMAGE_PIXELS];
    for c in 0..3 {
        for y in 0..s {
            let Some(sy) = (y + p.dy).checked_sub(CROP_PAD).filter(|&v| v < s) else { continue };
            for x in 0..s {
                let Some(sx) = (x + p.dx).checked_sub(CROP_PAD).filter(|&v| v < s) else { continue };
                let sx = if p.flip { s - 1 - sx } else { sx };
                out[(c * s + y) * s + x] = src[(c * s + sy) * s + sx];
            }
        }
    }
    LabeledImage {
        pixels: Tensor::from_vec(vec![3, s, s], out).expect("fixed shape"),
        label: img.label,
        coarse_label: img.coarse_label,
    }
}

/// Random horizontal flip (p = 0.5), zero-pad by 4, random 32x32 crop.
pub fn augment<R: Rng>(img: &LabeledImage, rng: &mut R) -> LabeledImage {
    augment_with(img, AugmentParams::sample(rng))
}

/// Per-channel population mean and standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    /// Leaves pixels unchanged.
    pub const IDENTITY: NormStats = NormStats { mean: [0.0; 3], std: [1.0; 3] };

    pub fn validate(&self) -> Result<()> {
        for (c, &s) in self.std.iter().enumerate() {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "channel {c} has standard deviation {s}; cannot normalize"
                )));
            }
        }
        Ok(())
    }
}

pub fn compute_norm_stats(train: &[LabeledImage]) -> Result<NormStats> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("cannot compute normalization statistics of an empty set".into()));
    }
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    let count = (train.len() * plane) as f64;
    let mut mean = [0.0f64; 3];
    for img in train {
        for (c, m) in mean.iter_mut().enumerate() {
            *m += img.pixels.data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = [0.0f64; 3];
    for img in train {
        for (c, v) in var.iter_mut().enumerate() {
            *v += img.pixels.data()[c * plane..(c + 1) * plane]
                .iter()
                .map(|&p| (p as f64 - mean[c]).powi(2))
                .sum::<f64>();
        }
    }
    let stats = NormStats { mean, std: var.map(|v| (v / count).sqrt()) };
    stats.validate()?;
    Ok(stats)
}

/// `(x - mean) / std` per channel.
pub fn apply_norm(img: &LabeledImage, stats: &NormStats) -> LabeledImage {
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    let mut px = img.pixels.clone();
    for (c, chunk) in px.data_mut().chunks_exact_mut(plane).enumerate() {
        let (m, s) = (stats.mean[c], stats.std[c]);
        for v in chunk {
            *v = ((*v as f64 - m) / s) as f32;
        }
    }
    LabeledImage { pixels: px, label: img.label, coarse_label: img.coarse_label }
}

/// A stacked, normalized mini-batch.
#[derive(Clone, Debug)]
pub struct Batch<T: Element> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

/// Stacks `(dataset index, image)` pairs. With `augment = Some((seed, epoch))`
/// each image is augmented with its own [`example_rng`] before normalization.
pub fn assemble_batch<T: Element>(
    items: &[(usize, &LabeledImage)],
    stats: &NormStats,
    augment: Option<(u64, usize)>,
) -> Result<Batch<T>> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut data = Vec::with_capacity(items.len() * IMAGE_PIXELS);
    let mut labels = Vec::with_capacity(items.len());
    for &(index, img) in items {
        let img = match augment {
            Some((seed, epoch)) => augment_with(img, AugmentParams::sample(&mut example_rng(seed, epoch, index))),
            None => img.clone(),
        };
        let n = apply_norm(&img, stats);
        data.extend(n.pixels.data().iter().map(|&v| T::from_f64(v as f64)));
        labels.push(img.label);
    }
    Ok(Batch { images: Tensor::from_vec(vec![items.len(), 3, IMAGE_SIDE, IMAGE_SIDE], data)?, labels })
}
