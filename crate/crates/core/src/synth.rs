//! Deterministic synthetic classification task.
//!
//! Each class is a (shape, size) pair drawn at a random position and colour
//! on a noise background. Sizes are 3, 5 and 7 pixels, so telling classes
//! apart needs receptive fields of matching extent.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

pub const PATTERN_SIZES: [usize; 3] = [3, 5, 7];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("sample index {index} out of range ({total} samples)")]
    IndexOutOfRange { index: usize, total: usize },
    #[error("dataset dump: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Plus,
    Ring,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthTaskSpec {
    /// At most `2 * PATTERN_SIZES.len()` classes.
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub samples_per_class: usize,
    pub seed: u64,
    /// Standard deviation of the background noise.
    pub noise: f64,
    pub val_fraction: f64,
}

impl Default for SynthTaskSpec {
    fn default() -> Self {
        Self {
            num_classes: 6,
            image_size: 32,
            channels: 3,
            samples_per_class: 1000,
            seed: 0,
            noise: 0.15,
            val_fraction: 0.1,
        }
    }
}

impl SynthTaskSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let max_classes = 2 * PATTERN_SIZES.len();
        if self.num_classes < 2 || self.num_classes > max_classes {
            return Err(SynthError::InvalidSpec(format!("num_classes must be in 2..={max_classes}")));
        }
        if self.image_size < PATTERN_SIZES[2] + 2 || self.channels == 0 || self.samples_per_class == 0 {
            return Err(SynthError::InvalidSpec(format!(
                "need image_size >= {}, channels >= 1, samples_per_class >= 1",
                PATTERN_SIZES[2] + 2
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(SynthError::InvalidSpec("noise must be >= 0 and val_fraction in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.num_classes * self.samples_per_class
    }

    /// Shape and size of class `label`.
    pub fn class_pattern(label: usize) -> (Shape, usize) {
        let shape = if label % 2 == 0 { Shape::Plus } else { Shape::Ring };
        (shape, PATTERN_SIZES[label / 2])
    }
}

fn on_pattern(shape: Shape, size: usize, dy: isize, dx: isize) -> bool {
    let r = (size / 2) as isize;
    match shape {
        Shape::Plus => (dx == 0 && dy.abs() <= r) || (dy == 0 && dx.abs() <= r),
        Shape::Ring => dx.abs().max(dy.abs()) == r,
    }
}

/// Sample `index` as a `[channels, size, size]` image and its label.
pub fn generate(spec: &SynthTaskSpec, index: usize) -> Result<(Tensor, usize), SynthError> {
    spec.validate()?;
    if index >= spec.total() {
        return Err(SynthError::IndexOutOfRange { index, total: spec.total() });
    }
    let label = index % spec.num_classes;
    let (shape, size) = SynthTaskSpec::class_pattern(label);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let n = spec.image_size;
    let r = size / 2;
    let cy = rng.gen_range(r..n - r) as isize;
    let cx = rng.gen_range(r..n - r) as isize;
    let colour: Vec<f64> = (0..spec.channels).map(|_| rng.gen_range(0.5..1.5)).collect();
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut data = vec![0.0; spec.channels * n * n];
    for (c, &amp) in colour.iter().enumerate() {
        for y in 0..n {
            for x in 0..n {
                let mut v = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                if on_pattern(shape, size, y as isize - cy, x as isize - cx) {
                    v += sign * amp;
                }
                data[(c * n + y) * n + x] = v;
            }
        }
    }
    Ok((Tensor::new(vec![spec.channels, n, n], data).expect("shape matches"), label))
}

/// All samples materialized, NCHW.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub size: usize,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn generate(spec: &SynthTaskSpec) -> Result<Self, SynthError> {
        spec.validate()?;
        let per = spec.channels * spec.image_size * spec.image_size;
        let mut images = Vec::with_capacity(spec.total() * per);
        let mut labels = Vec::with_capacity(spec.total());
        for i in 0..spec.total() {
            let (img, label) = generate(spec, i)?;
            images.extend_from_slice(img.data());
            labels.push(label);
        }
        Ok(Self { channels: spec.channels, size: spec.image_size, images, labels, num_classes: spec.num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn per_image(&self) -> usize {
        self.channels * self.size * self.size
    }

    /// Stacks the listed samples into an `[n, c, h, w]` tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.per_image();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images[i * per..][..per]);
        }
        let t = Tensor::new(vec![indices.len(), self.channels, self.size, self.size], data).expect("shape matches");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Writes `images.bin` (little-endian f32, NCHW) and `index.csv`.
    pub fn dump(&self, dir: &Path) -> Result<(), SynthError> {
        let io = |e: std::io::Error| SynthError::Io(e.to_string());
        fs::create_dir_all(dir).map_err(io)?;
        let mut bin = Vec::with_capacity(self.images.len() * 4);
        for &v in &self.images {
            bin.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(dir.join("images.bin"), bin).map_err(io)?;
        let mut idx = fs::File::create(dir.join("index.csv")).map_err(io)?;
        writeln!(idx, "index,label,offset_bytes,shape").map_err(io)?;
        let per = self.per_image();
        for (i, l) in self.labels.iter().enumerate() {
            writeln!(idx, "{i},{l},{},{}x{}x{}", i * per * 4, self.channels, self.size, self.size).map_err(io)?;
        }
        Ok(())
    }
}

/// Disjoint train/validation index lists, fixed by `seed`. The validation
/// part takes `val_fraction` of every class.
pub fn split(spec: &SynthTaskSpec) -> (Vec<usize>, Vec<usize>) {
    // stream 0 is reserved for the split; samples use streams 1..
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(0);
    let per_class_val = (spec.samples_per_class as f64 * spec.val_fraction).round() as usize;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in 0..spec.num_classes {
        let mut members: Vec<usize> =
            (0..spec.samples_per_class).map(|k| k * spec.num_classes + class).collect();
        members.shuffle(&mut rng);
        val.extend_from_slice(&members[..per_class_val]);
        train.extend_from_slice(&members[per_class_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}
