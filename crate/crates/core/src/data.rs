//! Datasets: the CIFAR-10 binary batch format and a seeded procedural
//! generator used for desk-scale runs.

use std::f32::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images `[N,C,H,W]` with values in `[0,1]` and their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    class_count: usize,
    split: Split,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        class_count: usize,
        split: Split,
    ) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Shape(format!(
                "dataset images must be [N,C,H,W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(Error::LabelOutOfRange {
                index,
                label,
                classes: class_count,
            });
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "image values must lie in [0,1]".into(),
            ));
        }
        Ok(Dataset {
            images,
            labels,
            class_count,
            split,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[C,H,W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Parses one CIFAR-10 binary batch: records of one label byte followed by
/// 3072 pixel bytes (R plane, G plane, B plane, each 32x32 row-major).
pub fn parse_cifar_batch(bytes: &[u8], path: &Path, split: Split) -> Result<Dataset> {
    let trailing = bytes.len() % CIFAR_RECORD_LEN;
    if trailing != 0 || bytes.is_empty() {
        return Err(Error::CifarTruncated {
            path: path.to_path_buf(),
            offset: bytes.len() - trailing,
            trailing: if bytes.is_empty() { 0 } else { trailing },
        });
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD_LEN - 1));
    for (record, chunk) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
        let label = chunk[0];
        if label as usize >= CIFAR_CLASSES {
            return Err(Error::CifarLabel {
                path: path.to_path_buf(),
                record,
                label,
            });
        }
        labels.push(label as usize);
        pixels.extend(chunk[1..].iter().map(|&b| b as f32 / 255.0));
    }
    let images = Tensor::new(vec![n, 3, 32, 32], pixels)?;
    Dataset::new(images, labels, CIFAR_CLASSES, split)
}

pub fn load_cifar_file(path: &Path, split: Split) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_batch(&bytes, path, split)
}

/// Loads the five training batches and the test batch from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train_parts = CIFAR_TRAIN_FILES
        .iter()
        .map(|name| load_cifar_file(&dir.join(name), Split::Train))
        .collect::<Result<Vec<_>>>()?;
    let train = concat(&train_parts, Split::Train)?;
    let test = load_cifar_file(&dir.join(CIFAR_TEST_FILE), Split::Test)?;
    Ok((train, test))
}

pub fn cifar_paths(dir: &Path) -> Vec<PathBuf> {
    CIFAR_TRAIN_FILES
        .iter()
        .chain(std::iter::once(&CIFAR_TEST_FILE))
        .map(|n| dir.join(n))
        .collect()
}

fn concat(parts: &[Dataset], split: Split) -> Result<Dataset> {
    let first = &parts[0];
    let mut shape = first.images.shape().to_vec();
    shape[0] = parts.iter().map(Dataset::len).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    let mut labels = Vec::with_capacity(shape[0]);
    for p in parts {
        data.extend_from_slice(p.images.data());
        labels.extend_from_slice(&p.labels);
    }
    Dataset::new(Tensor::new(shape, data)?, labels, first.class_count, split)
}

/// Parameters of the procedural dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub noise: f32,
}

impl SynthSpec {
    pub fn new(seed: u64, classes: usize, per_class: usize, size: usize) -> Self {
        SynthSpec {
            seed,
            classes,
            per_class,
            size,
            noise: 0.1,
        }
    }
}

/// Deterministic 3-channel images: each class gets an oriented bar and an
/// off-centre blob in a class colour, plus uniform noise of amplitude
/// `noise`. Samples are interleaved by class, so the first `classes` samples
/// hold one image of each class.
pub fn synth_dataset(spec: SynthSpec, split: Split) -> Result<Dataset> {
    let SynthSpec {
        seed,
        classes,
        per_class,
        size,
        noise,
    } = spec;
    if classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs at least 2 classes, got {classes}"
        )));
    }
    if size < 8 {
        return Err(Error::InvalidArgument(format!(
            "synthetic image size must be at least 8, got {size}"
        )));
    }
    if per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be positive".into()));
    }
    let prototypes: Vec<Vec<f32>> = (0..classes)
        .map(|k| class_prototype(k, classes, size))
        .collect();
    let n = classes * per_class;
    let plane = 3 * size * size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        labels.push(label);
        for &p in &prototypes[label] {
            let jitter = if noise > 0.0 {
                rng.random_range(-noise..=noise)
            } else {
                0.0
            };
            data.push((p + jitter).clamp(0.0, 1.0));
        }
    }
    let images = Tensor::new(vec![n, 3, size, size], data)?;
    Dataset::new(images, labels, classes, split)
}

fn class_prototype(class: usize, classes: usize, size: usize) -> Vec<f32> {
    let s = size as f32;
    let centre = (s - 1.0) / 2.0;
    let angle = PI * class as f32 / classes as f32;
    let (dir_x, dir_y) = (angle.cos(), angle.sin());
    let blob_angle = 2.0 * PI * class as f32 / classes as f32 + PI / 4.0;
    let (blob_x, blob_y) = (
        centre + 0.3 * s * blob_angle.cos(),
        centre + 0.3 * s * blob_angle.sin(),
    );
    let bar_half_width = (s / 16.0).max(0.75);
    let blob_sigma = s / 10.0;
    let hue = class as f32 / classes as f32;
    let colour = [
        0.5 + 0.5 * (2.0 * PI * hue).cos(),
        0.5 + 0.5 * (2.0 * PI * (hue - 1.0 / 3.0)).cos(),
        0.5 + 0.5 * (2.0 * PI * (hue - 2.0 / 3.0)).cos(),
    ];
    let mut out = vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f32 - centre, y as f32 - centre);
            // distance to the line through the centre along (dir_x, dir_y)
            let dist = (dx * dir_y - dy * dir_x).abs();
            let bar = if dist <= bar_half_width { 1.0 } else { 0.0 };
            let r2 = (x as f32 - blob_x).powi(2) + (y as f32 - blob_y).powi(2);
            let blob = (-r2 / (2.0 * blob_sigma * blob_sigma)).exp();
            let intensity = (0.75 * bar + 0.6 * blob).min(1.0);
            for (c, &col) in colour.iter().enumerate() {
                out[c * size * size + y * size + x] =
                    (0.15 + intensity * (0.25 + 0.6 * col)).clamp(0.0, 1.0);
            }
        }
    }
    out
}
