//! Datasets: IDX and CIFAR-10 binary ingestion, stratified sampling,
//! normalization and a synthetic two-class task.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `[N, C, H, W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Data(format!("images must be [N, C, H, W], got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Data(format!("{} images but {} labels", images.shape()[0], labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self { name: name.into(), images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        let images = self.images.select(0, idx)?;
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Ok(Self { name: self.name.clone(), images, labels, classes: self.classes })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        self.labels.iter().for_each(|&l| counts[l] += 1);
        counts
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.classes];
        self.labels.iter().enumerate().for_each(|(i, &l)| by[l].push(i));
        by
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Data(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Data(format!("{what}: truncated header")))
}

/// Parses an IDX image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IDX_IMAGES {
        return Err(Error::Data(format!("images: bad magic 0x{magic:08x}")));
    }
    let n = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Data(format!("images: truncated file, expected {need} pixel bytes, found {}", body.len())));
    }
    Ok((n, rows, cols, &body[..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != IDX_LABELS {
        return Err(Error::Data(format!("labels: bad magic 0x{magic:08x}")));
    }
    let n = be_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Data(format!("labels: truncated file, expected {n} labels, found {}", body.len())));
    }
    Ok(&body[..n])
}

fn dataset_name(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into())
}

/// Loads an IDX image/label pair (optionally gzip-compressed), scaling pixels to [0, 1].
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let ib = read_maybe_gz(ip)?;
    let lb = read_maybe_gz(lp)?;
    let (n, rows, cols, pixels) = parse_idx_images(&ib)?;
    let labels = parse_idx_labels(&lb)?;
    if labels.len() != n {
        return Err(Error::Data(format!("count mismatch: {n} images, {} labels", labels.len())));
    }
    if n == 0 {
        return Err(Error::Data("empty dataset".into()));
    }
    let classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    let images = Tensor::new(vec![n, 1, rows, cols], pixels.iter().map(|&b| b as f64 / 255.0).collect())?;
    Dataset::new(dataset_name(ip), images, labels.iter().map(|&l| l as usize).collect(), classes)
}

/// Writes an IDX pair; `gzip` compresses both files.
pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    rows: usize,
    cols: usize,
    pixels: &[u8],
    labels: &[u8],
    gzip: bool,
) -> Result<()> {
    if pixels.len() != labels.len() * rows * cols {
        return Err(Error::Data("pixel count does not match labels x rows x cols".into()));
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES, labels.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + labels.len());
    for v in [IDX_LABELS, labels.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    for (path, bytes) in [(images_path.as_ref(), img), (labels_path.as_ref(), lab)] {
        let out = if gzip {
            let mut enc = flate2::GzBuilder::new().mtime(0).write(Vec::new(), flate2::Compression::default());
            enc.write_all(&bytes)?;
            enc.finish()?
        } else {
            bytes
        };
        std::fs::write(path, out)?;
    }
    Ok(())
}

/// Loads CIFAR-10 binary batches: one label byte then 3x32x32 channel-major
/// pixels per record.
pub fn load_cifar_batches<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    const RECORD: usize = 1 + 3 * 32 * 32;
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for p in paths {
        let bytes = read_maybe_gz(p.as_ref())?;
        if bytes.is_empty() || bytes.len() % RECORD != 0 {
            return Err(Error::Data(format!("{}: size {} is not a whole number of records", p.as_ref().display(), bytes.len())));
        }
        for rec in bytes.chunks(RECORD) {
            labels.push(rec[0] as usize);
            pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    if labels.is_empty() {
        return Err(Error::Data("no CIFAR batches given".into()));
    }
    let n = labels.len();
    Dataset::new("cifar10", Tensor::new(vec![n, 3, 32, 32], pixels)?, labels, 10)
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub const MNIST: ([f64; 1], [f64; 1]) = ([0.1307], [0.3081]);
    pub const FASHION_MNIST: ([f64; 1], [f64; 1]) = ([0.2860], [0.3530]);
    pub const CIFAR10: ([f64; 3], [f64; 3]) = ([0.4914, 0.4822, 0.4465], [0.2470, 0.2435, 0.2616]);

    /// Fixed constants for a known dataset name.
    pub fn for_dataset(name: &str) -> Option<Self> {
        let name = name.to_ascii_lowercase();
        let (mean, std): (&[f64], &[f64]) = if name.contains("fashion") {
            (&Self::FASHION_MNIST.0, &Self::FASHION_MNIST.1)
        } else if name.contains("mnist") {
            (&Self::MNIST.0, &Self::MNIST.1)
        } else if name.contains("cifar") {
            (&Self::CIFAR10.0, &Self::CIFAR10.1)
        } else {
            return None;
        };
        Some(Self { mean: mean.to_vec(), std: std.to_vec() })
    }

    fn apply(&self, x: &mut Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<()> {
        let (n, c, s) = x.channel_layout("normalize")?;
        if self.mean.len() != c || self.std.len() != c {
            return Err(Error::shape("normalize", x.shape(), &[self.mean.len()]));
        }
        for b in 0..n {
            for ch in 0..c {
                let (m, sd) = (self.mean[ch], self.std[ch]);
                x.data_mut()[(b * c + ch) * s..(b * c + ch + 1) * s].iter_mut().for_each(|v| *v = f(*v, m, sd));
            }
        }
        Ok(())
    }

    pub fn normalize(&self, x: &mut Tensor) -> Result<()> {
        self.apply(x, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, x: &mut Tensor) -> Result<()> {
        self.apply(x, |v, m, s| v * s + m)
    }
}

/// Seeded stratified sample of `n_per_class` items per class, shuffled.
pub fn subset(ds: &Dataset, n_per_class: usize, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::Data("n_per_class must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(n_per_class * ds.classes);
    for (class, mut idx) in ds.indices_by_class().into_iter().enumerate() {
        if idx.len() < n_per_class {
            return Err(Error::Data(format!("class {class} has {} samples, fewer than {n_per_class}", idx.len())));
        }
        idx.shuffle(&mut rng);
        chosen.extend_from_slice(&idx[..n_per_class]);
    }
    chosen.shuffle(&mut rng);
    ds.select(&chosen)
}

/// Seeded stratified split into `(train, test)`, each shuffled.
pub fn stratified_split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Data(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut idx in ds.indices_by_class() {
        idx.shuffle(&mut rng);
        let k = (idx.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok((ds.select(&train)?, ds.select(&test)?))
}

/// Template used by [`synthetic_planted`]: a bright field with a mild
/// separable ripple, scaled to unit root-mean-square.
pub fn planted_template(shape: &[usize]) -> Tensor {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let raw = Tensor::from_fn(&[c, h, w], |i| {
        let (y, x) = ((i / w) % h, i % w);
        let fy = (std::f64::consts::TAU * y as f64 / h as f64).cos();
        let fx = (std::f64::consts::TAU * x as f64 / w as f64).cos();
        1.0 + 0.5 * fy * fx
    });
    let rms = (raw.data().iter().map(|v| v * v).sum::<f64>() / raw.numel() as f64).sqrt();
    raw.map(|v| v / rms)
}

pub const PLANTED_NOISE: f64 = 0.5;

/// `n_per_class` images of each of two classes, `x = s * a * P + 0.5 * e`:
/// `s = -1` for class 0 and `+1` for class 1 (alternating), amplitude `a ~ U(0.5, 1.5)`, `P` the fixed
/// [`planted_template`] and `e` i.i.d. uniform noise of unit variance.
/// The sign of the mean pixel separates the classes, so one conv layer
/// followed by pooling suffices and deeper structures are redundant.
pub fn synthetic_planted(shape: &[usize], n_per_class: usize, seed: u64) -> Result<Dataset> {
    if n_per_class < 2 {
        return Err(Error::Data(format!("need at least 2 samples per class, got {n_per_class}")));
    }
    let n = 2 * n_per_class;
    if shape.len() != 3 {
        return Err(Error::Data(format!("sample shape must be [C, H, W], got {shape:?}")));
    }
    let template = planted_template(shape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = template.numel();
    let half_width = 3f64.sqrt();
    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let s = if label == 1 { 1.0 } else { -1.0 };
        let a = rng.gen_range(0.5..1.5);
        data.extend(template.data().iter().map(|p| s * a * p + PLANTED_NOISE * rng.gen_range(-half_width..half_width)));
        labels.push(label);
    }
    let mut full = vec![n];
    full.extend_from_slice(shape);
    Dataset::new("synthetic_planted", Tensor::new(full, data)?, labels, 2)
}

/// Summary moments used to compare synthetic draws.
pub fn moments(ds: &Dataset) -> BTreeMap<&'static str, f64> {
    let d = ds.images.data();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mean_abs = d.iter().map(|v| v.abs()).sum::<f64>() / n;
    BTreeMap::from([("mean", mean), ("var", var), ("mean_abs", mean_abs)])
}
