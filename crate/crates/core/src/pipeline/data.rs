//! Image datasets: IDX files, the synthetic generator and normalized splits.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensorcore::{Real, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("label {label} is not below the class count {classes}")]
    Label { label: usize, classes: usize },
    #[error("invalid dataset settings: {0}")]
    Settings(String),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

/// Unnormalized 8-bit images with labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDataset {
    /// `(C, H, W)` of one image.
    pub shape: (usize, usize, usize),
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    /// Samples `range` as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        let n = self.image_len();
        Self {
            shape: self.shape,
            images: self.images[range.start * n..range.end * n].to_vec(),
            labels: self.labels[range].to_vec(),
        }
    }

    /// Writes `<prefix>-images-idx3-ubyte` and `<prefix>-labels-idx1-ubyte`.
    /// Only single-channel images fit the 3-axis IDX layout.
    pub fn write_idx(&self, dir: &Path, prefix: &str) -> Result<(), DataError> {
        if self.shape.0 != 1 {
            return Err(DataError::Settings(format!("IDX export needs 1 channel, got {}", self.shape.0)));
        }
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let ipath = dir.join(format!("{prefix}-images-idx3-ubyte"));
        let mut out = Vec::with_capacity(16 + self.images.len());
        for v in [IDX_IMAGES_MAGIC, self.len() as u32, self.shape.1 as u32, self.shape.2 as u32] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(&self.images);
        fs::File::create(&ipath).and_then(|mut f| f.write_all(&out)).map_err(io_err(&ipath))?;

        let lpath = dir.join(format!("{prefix}-labels-idx1-ubyte"));
        let mut out = Vec::with_capacity(8 + self.len());
        out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(self.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.labels);
        fs::File::create(&lpath).and_then(|mut f| f.write_all(&out)).map_err(io_err(&lpath))?;
        Ok(())
    }

    pub fn read_idx(images: &Path, labels: &Path) -> Result<Self, DataError> {
        let (dims, pixels) = read_idx_file(images, IDX_IMAGES_MAGIC)?;
        let (ldims, labels_data) = read_idx_file(labels, IDX_LABELS_MAGIC)?;
        if dims[0] != ldims[0] {
            return Err(DataError::CountMismatch { images: dims[0], labels: ldims[0] });
        }
        Ok(Self { shape: (1, dims[1], dims[2]), images: pixels, labels: labels_data })
    }
}

fn read_idx_file(path: &Path, magic: u32) -> Result<(Vec<usize>, Vec<u8>), DataError> {
    let fmt = |reason: String| DataError::Format { path: path.display().to_string(), reason };
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_err(path))?;
    if bytes.len() < 4 {
        return Err(fmt("truncated header".into()));
    }
    let found = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if found != magic {
        return Err(fmt(format!("magic {found:#010x}, expected {magic:#010x}")));
    }
    let rank = (magic & 0xff) as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(fmt("truncated header".into()));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let expected: usize = dims.iter().product();
    if bytes.len() - header != expected {
        return Err(fmt(format!("dims {dims:?} need {expected} bytes of data, found {}", bytes.len() - header)));
    }
    bytes.drain(..header);
    Ok((dims, bytes))
}

/// Class-conditional stroke images: each class owns a prototype of three
/// blurred line segments; a sample is its prototype shifted by up to three
/// pixels, scaled, overlaid with a faint prototype of another class and
/// corrupted by Gaussian noise.
pub fn synthetic(samples: usize, classes: usize, seed: u64) -> RawDataset {
    const SIDE: usize = 28;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let mut img = vec![0.0; SIDE * SIDE];
            for _ in 0..3 {
                let a = (rng.gen_range(5.0..23.0), rng.gen_range(5.0..23.0));
                let b = (rng.gen_range(5.0..23.0), rng.gen_range(5.0..23.0));
                draw_segment(&mut img, SIDE, a, b, 1.2);
            }
            img
        })
        .collect();
    let noise = Normal::new(0.0, 0.35).expect("valid sigma");
    let mut images = Vec::with_capacity(samples * SIDE * SIDE);
    let mut labels = Vec::with_capacity(samples);
    for _ in 0..samples {
        let label = rng.gen_range(0..classes);
        let other = rng.gen_range(0..classes);
        let (dx, dy) = (rng.gen_range(-3..=3), rng.gen_range(-3..=3));
        let (ox, oy) = (rng.gen_range(-3..=3), rng.gen_range(-3..=3));
        let scale = rng.gen_range(0.5..1.0);
        let mix = rng.gen_range(0.0..0.7);
        for y in 0..SIDE as i32 {
            for x in 0..SIDE as i32 {
                let v = scale * shifted(&prototypes[label], SIDE, x - dx, y - dy)
                    + mix * shifted(&prototypes[other], SIDE, x - ox, y - oy)
                    + noise.sample(&mut rng);
                images.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        labels.push(label as u8);
    }
    RawDataset { shape: (1, SIDE, SIDE), images, labels }
}

fn shifted(img: &[f64], side: usize, x: i32, y: i32) -> f64 {
    if (0..side as i32).contains(&x) && (0..side as i32).contains(&y) {
        img[y as usize * side + x as usize]
    } else {
        0.0
    }
}

fn draw_segment(img: &mut [f64], side: usize, a: (f64, f64), b: (f64, f64), width: f64) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = (dx * dx + dy * dy).max(1e-9);
    for y in 0..side {
        for x in 0..side {
            let (px, py) = (x as f64, y as f64);
            let t = (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0);
            let (cx, cy) = (a.0 + t * dx - px, a.1 + t * dy - py);
            let v = (-(cx * cx + cy * cy) / (2.0 * width * width)).exp();
            let p = &mut img[y * side + x];
            *p = p.max(v);
        }
    }
}

/// Normalized images `[N, C, H, W]` with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Split {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self, DataError> {
        let n = images.shape().first().copied().unwrap_or(0);
        if images.shape().len() != 4 || n != labels.len() {
            return Err(DataError::CountMismatch { images: n, labels: labels.len() });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::Label { label, classes });
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `(C, H, W)` of one image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn batch(&self, rows: &[usize]) -> (Tensor, Vec<usize>) {
        (self.images.gather_rows(rows), rows.iter().map(|&r| self.labels[r]).collect())
    }

    /// The first `n` images (all of them if fewer).
    pub fn head(&self, n: usize) -> Tensor {
        let rows: Vec<usize> = (0..n.min(self.len())).collect();
        self.images.gather_rows(&rows)
    }

    /// Minibatch row indices for one pass, shuffled by `rng`.
    pub fn shuffled_batches<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
    }
}

/// Train and validation splits normalized with train-split statistics.
/// Training code only ever receives [`Dataset::train`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub validation: Split,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Dataset {
    pub fn from_raw(train: &RawDataset, validation: &RawDataset) -> Result<Self, DataError> {
        if train.is_empty() || validation.is_empty() {
            return Err(DataError::Empty);
        }
        if train.shape != validation.shape {
            return Err(DataError::Settings(format!("split shapes differ: {:?} vs {:?}", train.shape, validation.shape)));
        }
        for raw in [train, validation] {
            if raw.images.len() != raw.len() * raw.image_len() {
                return Err(DataError::CountMismatch { images: raw.images.len() / raw.image_len().max(1), labels: raw.len() });
            }
        }
        let classes = train.labels.iter().chain(&validation.labels).map(|&l| l as usize + 1).max().unwrap_or(0);
        let (c, h, w) = train.shape;
        let plane = h * w;
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let values = || {
                train
                    .images
                    .chunks(c * plane)
                    .flat_map(move |img| img[ch * plane..(ch + 1) * plane].iter().map(|&p| p as f64 / 255.0))
            };
            let count = (train.len() * plane) as f64;
            let mu = values().sum::<f64>() / count;
            let var = values().map(|v| (v - mu) * (v - mu)).sum::<f64>() / count;
            mean[ch] = mu;
            std[ch] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        let normalize = |raw: &RawDataset| -> Result<Split, DataError> {
            let data: Vec<Real> = raw
                .images
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    let ch = (i / plane) % c;
                    ((p as f64 / 255.0 - mean[ch]) / std[ch]) as Real
                })
                .collect();
            let images = Tensor::new(vec![raw.len(), c, h, w], data).expect("sized above");
            Split::new(images, raw.labels.iter().map(|&l| l as usize).collect(), classes)
        };
        Ok(Self { train: normalize(train)?, validation: normalize(validation)?, mean, std })
    }

    /// Holds out the trailing `validation_fraction` of `raw`.
    pub fn holdout(raw: &RawDataset, validation_fraction: f64) -> Result<Self, DataError> {
        if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
            return Err(DataError::Settings(format!("validation fraction {validation_fraction} must lie in (0, 1)")));
        }
        let n_val = ((raw.len() as f64 * validation_fraction).round() as usize).clamp(1, raw.len().saturating_sub(1).max(1));
        let cut = raw.len() - n_val;
        Self::from_raw(&raw.slice(0..cut), &raw.slice(cut..raw.len()))
    }

    pub fn classes(&self) -> usize {
        self.train.classes()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    Idx,
    Synthetic,
}

impl std::str::FromStr for DataFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "idx" => Ok(Self::Idx),
            "synthetic" => Ok(Self::Synthetic),
            _ => Err(format!("unknown dataset format `{s}` (expected idx or synthetic)")),
        }
    }
}

fn default_samples() -> usize {
    10_000
}
fn default_classes() -> usize {
    10
}
fn default_validation() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub format: DataFormat,
    /// Directory holding the IDX files (IDX format only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Fraction held out for validation when no separate test files exist.
    #[serde(default = "default_validation")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl DataConfig {
    pub fn synthetic(samples: usize, seed: u64) -> Self {
        Self {
            format: DataFormat::Synthetic,
            path: None,
            samples,
            classes: default_classes(),
            validation_fraction: default_validation(),
            seed,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        match (self.format, &self.path) {
            (DataFormat::Idx, None) => errs.push("dataset.path is required for the idx format".to_string()),
            (DataFormat::Idx, Some(p)) if !p.join(TRAIN_IMAGES).is_file() || !p.join(TRAIN_LABELS).is_file() => {
                errs.push(format!("dataset.path {} lacks {TRAIN_IMAGES} / {TRAIN_LABELS}", p.display()))
            }
            _ => {}
        }
        if self.format == DataFormat::Synthetic {
            if self.samples < 2 {
                errs.push(format!("dataset.samples {} must be at least 2", self.samples));
            }
            if !(2..=256).contains(&self.classes) {
                errs.push(format!("dataset.classes {} must lie in [2, 256]", self.classes));
            }
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            errs.push(format!("dataset.validation_fraction {} must lie in (0, 1)", self.validation_fraction));
        }
        errs
    }
}

/// Loads and normalizes the configured dataset. IDX directories with
/// `t10k-*` files use them for validation; otherwise the training files
/// are split.
pub fn ingest(config: &DataConfig) -> Result<Dataset, DataError> {
    match config.format {
        DataFormat::Synthetic => Dataset::holdout(&synthetic(config.samples, config.classes, config.seed), config.validation_fraction),
        DataFormat::Idx => {
            let dir = config.path.as_deref().ok_or_else(|| DataError::Settings("idx format needs a path".into()))?;
            let train = RawDataset::read_idx(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?;
            if dir.join(TEST_IMAGES).is_file() && dir.join(TEST_LABELS).is_file() {
                let test = RawDataset::read_idx(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?;
                Dataset::from_raw(&train, &test)
            } else {
                Dataset::holdout(&train, config.validation_fraction)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = synthetic(2000, 10, 5);
        assert_eq!(a, synthetic(2000, 10, 5));
        assert_ne!(a, synthetic(2000, 10, 6));
        assert_eq!(a.images.len(), 2000 * 784);
        let mut counts = [0usize; 10];
        for &l in &a.labels {
            counts[l as usize] += 1;
        }
        // binomial(2000, 0.1): sd ~ 13.4
        assert!(counts.iter().all(|&c| (200 - 45..=200 + 45).contains(&c)), "{counts:?}");
    }

    #[test]
    fn idx_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let raw = synthetic(50, 10, 1);
        raw.write_idx(dir.path(), "train").unwrap();
        let back = RawDataset::read_idx(&dir.path().join(TRAIN_IMAGES), &dir.path().join(TRAIN_LABELS)).unwrap();
        assert_eq!(back, raw);
    }

    #[test]
    fn idx_rejects_swapped_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        synthetic(5, 10, 1).write_idx(dir.path(), "train").unwrap();
        let (i, l) = (dir.path().join(TRAIN_IMAGES), dir.path().join(TRAIN_LABELS));
        let err = RawDataset::read_idx(&l, &i).unwrap_err();
        assert!(matches!(err, DataError::Format { .. }), "{err}");
        assert!(err.to_string().contains("0x00000801"));

        let mut bytes = fs::read(&i).unwrap();
        bytes.truncate(bytes.len() - 1);
        fs::write(&i, bytes).unwrap();
        assert!(matches!(RawDataset::read_idx(&i, &l), Err(DataError::Format { .. })));
    }

    #[test]
    fn label_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        synthetic(5, 10, 1).write_idx(dir.path(), "train").unwrap();
        synthetic(6, 10, 1).write_idx(dir.path(), "other").unwrap();
        let err = RawDataset::read_idx(&dir.path().join(TRAIN_IMAGES), &dir.path().join("other-labels-idx1-ubyte")).unwrap_err();
        assert!(matches!(err, DataError::CountMismatch { images: 5, labels: 6 }));
    }

    #[test]
    fn normalization_uses_train_statistics() {
        let raw = synthetic(500, 10, 3);
        let d = Dataset::holdout(&raw, 0.2).unwrap();
        assert_eq!((d.train.len(), d.validation.len()), (400, 100));
        let data = d.train.images().data();
        let mean = data.iter().sum::<Real>() / data.len() as Real;
        let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / data.len() as Real;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
        assert_eq!(d.classes(), 10);
    }

    #[test]
    fn ingest_prefers_test_files() {
        let dir = tempfile::tempdir().unwrap();
        synthetic(40, 10, 1).write_idx(dir.path(), "train").unwrap();
        let cfg = DataConfig { format: DataFormat::Idx, path: Some(dir.path().to_path_buf()), ..DataConfig::synthetic(0, 0) };
        assert!(cfg.validate().is_empty());
        assert_eq!(ingest(&cfg).unwrap().validation.len(), 8);
        synthetic(15, 10, 2).write_idx(dir.path(), "t10k").unwrap();
        let d = ingest(&cfg).unwrap();
        assert_eq!((d.train.len(), d.validation.len()), (40, 15));
    }
}
