//! Desk-scale image datasets, stored as NHWC values in `[0, 1]`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use repq::{Scalar, Tensor};

use crate::config::DatasetSpec;
use crate::error::{Result, TrainError};

#[derive(Clone, Debug)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pixels: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(height: usize, width: usize, channels: usize, classes: usize, pixels: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        let per = height * width * channels;
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(TrainError::Data(format!(
                "{} pixel values for {} images of {height}x{width}x{channels}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(TrainError::Data(format!("label {l} out of range for {classes} classes")));
        }
        Ok(Dataset {
            height,
            width,
            channels,
            classes,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.height * self.width * self.channels;
        &self.pixels[i * per..(i + 1) * per]
    }

    /// Images and labels at `indices` as a `[B, H, W, C]` tensor.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let per = self.height * self.width * self.channels;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&p| T::of(p as f64)));
        }
        let t = Tensor::new(vec![indices.len(), self.height, self.width, self.channels], data).expect("batch shape");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Index batches for one epoch, shuffled by `(seed, epoch)`.
    pub fn epoch_batches(&self, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch as u64);
        order.shuffle(&mut rng);
        order.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
    }

    /// Index batches in storage order.
    pub fn sequential_batches(&self, batch: usize) -> Vec<Vec<usize>> {
        (0..self.len()).collect::<Vec<_>>().chunks(batch.max(1)).map(|c| c.to_vec()).collect()
    }
}

pub const SYNTHETIC_SIZE: usize = 16;
pub const SYNTHETIC_CLASSES: usize = 10;

/// One 16x16 image of class `class`: stripes in four orientations, a
/// checkerboard, a filled square, a ring, a cross, a blob and an X, each
/// with random placement, contrast and additive Gaussian noise.
fn synthetic_image(class: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = SYNTHETIC_SIZE as f64;
    let amp: f64 = rng.random_range(0.4..0.8);
    let bg: f64 = rng.random_range(0.1..0.4);
    let freq: f64 = rng.random_range(0.6..1.4);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (cy, cx): (f64, f64) = (rng.random_range(4.0..n - 4.0), rng.random_range(4.0..n - 4.0));
    let size: f64 = rng.random_range(2.0..4.5);
    let thick: f64 = rng.random_range(0.6..1.2);
    let period: usize = rng.random_range(2..5);
    let normal = Normal::new(0.0, noise.max(0.0)).expect("noise");
    let mut img = Vec::with_capacity(SYNTHETIC_SIZE * SYNTHETIC_SIZE);
    for y in 0..SYNTHETIC_SIZE {
        for x in 0..SYNTHETIC_SIZE {
            let (yf, xf) = (y as f64, x as f64);
            let (dy, dx) = (yf - cy, xf - cx);
            let r = (dy * dy + dx * dx).sqrt();
            let wave = |t: f64| 0.5 + 0.5 * (freq * t + phase).sin();
            let v = match class {
                0 => wave(yf),
                1 => wave(xf),
                2 => wave((xf + yf) / std::f64::consts::SQRT_2),
                3 => wave((xf - yf) / std::f64::consts::SQRT_2),
                4 => (((x / period) + (y / period)) % 2) as f64,
                5 => (dy.abs() <= size && dx.abs() <= size) as u8 as f64,
                6 => ((r - size - 1.0).abs() <= thick) as u8 as f64,
                7 => (dy.abs() <= thick && dx.abs() <= size + 2.0 || dx.abs() <= thick && dy.abs() <= size + 2.0) as u8 as f64,
                8 => (-r * r / (2.0 * size * size)).exp(),
                _ => (((dy - dx).abs() <= thick * 1.4 || (dy + dx).abs() <= thick * 1.4) && r <= size + 2.5) as u8 as f64,
            };
            let p = bg + amp * v + normal.sample(rng);
            img.push(p.clamp(0.0, 1.0) as f32);
        }
    }
    img
}

/// Balanced synthetic set; sample `i` has class `i % 10`.
pub fn synthetic(len: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(len * SYNTHETIC_SIZE * SYNTHETIC_SIZE);
    let mut labels = Vec::with_capacity(len);
    for i in 0..len {
        let class = i % SYNTHETIC_CLASSES;
        pixels.extend(synthetic_image(class, noise, &mut rng));
        labels.push(class);
    }
    Dataset::new(SYNTHETIC_SIZE, SYNTHETIC_SIZE, 1, SYNTHETIC_CLASSES, pixels, labels).expect("synthetic shape")
}

/// Two classes: the brighter half of the image (left for class 0, right
/// for class 1) is lifted by 0.3 over mild noise.
pub fn separable(len: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.05).expect("noise");
    let s = SYNTHETIC_SIZE;
    let mut pixels = Vec::with_capacity(len * s * s);
    let mut labels = Vec::with_capacity(len);
    for i in 0..len {
        let class = i % 2;
        for _y in 0..s {
            for x in 0..s {
                let lit = (x < s / 2) == (class == 0);
                let p: f64 = 0.35 + if lit { 0.3 } else { 0.0 } + normal.sample(&mut rng);
                pixels.push(p.clamp(0.0, 1.0) as f32);
            }
        }
        labels.push(class);
    }
    Dataset::new(s, s, 1, 2, pixels, labels).expect("separable shape")
}

/// Read `images.bin` (u8, NHWC, row-major) and `labels.txt`.
pub fn load_folder(dir: &Path, height: usize, width: usize, channels: usize) -> Result<Dataset> {
    let img_path = dir.join("images.bin");
    let lbl_path = dir.join("labels.txt");
    let raw = std::fs::read(&img_path).map_err(|e| TrainError::io(&img_path, e))?;
    let text = std::fs::read_to_string(&lbl_path).map_err(|e| TrainError::io(&lbl_path, e))?;
    let labels = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.parse::<usize>()
                .map_err(|_| TrainError::Data(format!("{}:{}: bad label `{l}`", lbl_path.display(), i + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let pixels = raw.iter().map(|&b| b as f32 / 255.0).collect();
    Dataset::new(height, width, channels, classes, pixels, labels)
}

/// Train and eval splits for a dataset spec.
pub fn load(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    match spec {
        DatasetSpec::Synthetic {
            train_size,
            eval_size,
            noise,
            seed,
        } => Ok((
            synthetic(*train_size, *noise, *seed),
            synthetic(*eval_size, *noise, seed.wrapping_add(1) ^ 0x5eed),
        )),
        DatasetSpec::Separable {
            train_size,
            eval_size,
            seed,
        } => Ok((separable(*train_size, *seed), separable(*eval_size, seed.wrapping_add(1) ^ 0x5eed))),
        DatasetSpec::Folder {
            path,
            height,
            width,
            channels,
            eval_fraction,
        } => {
            let all = load_folder(path, *height, *width, *channels)?;
            let n_eval = (all.len() as f64 * eval_fraction).round() as usize;
            let n_train = all.len() - n_eval;
            let per = height * width * channels;
            let split = |r: std::ops::Range<usize>| {
                Dataset::new(
                    *height,
                    *width,
                    *channels,
                    all.classes,
                    all.pixels[r.start * per..r.end * per].to_vec(),
                    all.labels[r].to_vec(),
                )
            };
            Ok((split(0..n_train)?, split(n_train..all.len())?))
        }
    }
}
