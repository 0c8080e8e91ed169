//! In-memory labeled image sets, normalization, augmentation and a
//! procedural image generator for offline runs.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f32::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel affine map from pixel space `[0, 1]` to network input space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn cifar10() -> Self {
        Normalization {
            mean: vec![0.4914, 0.4822, 0.4465],
            std: vec![0.2470, 0.2435, 0.2616],
        }
    }

    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() || self.mean.is_empty() {
            return Err(Error::config("normalization mean/std lengths differ"));
        }
        if self.std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::config("normalization std must be positive"));
        }
        Ok(())
    }

    /// Normalized-space image of the pixel range `[0, 1]` for channel `c`.
    pub fn bounds(&self, c: usize) -> (f32, f32) {
        ((0.0 - self.mean[c]) / self.std[c], (1.0 - self.mean[c]) / self.std[c])
    }

    pub fn normalize(&self, pixels: &Tensor) -> Tensor {
        let mut out = pixels.clone();
        self.apply(&mut out, |v, m, s| (v - m) / s);
        out
    }

    pub fn denormalize(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        self.apply(&mut out, |v, m, s| v * s + m);
        out
    }

    fn apply(&self, t: &mut Tensor, f: impl Fn(f32, f32, f32) -> f32) {
        let [_, c, h, w] = t.shape();
        assert_eq!(c, self.channels(), "normalization channel count");
        for (idx, plane) in t.data_mut().chunks_mut(h * w).enumerate() {
            let ch = idx % c;
            let (m, s) = (self.mean[ch], self.std[ch]);
            plane.iter_mut().for_each(|v| *v = f(*v, m, s));
        }
    }
}

/// Labeled images kept in pixel space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.batch() != labels.len() {
            return Err(Error::shape(images.batch(), labels.len()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label { label, num_classes });
        }
        Ok(Dataset {
            name: name.into(),
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.images.height()
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Samples whose label is in `classes`; label indices are kept.
    pub fn filter_classes(&self, classes: &[usize]) -> Result<Dataset> {
        if classes.is_empty() {
            return Err(Error::config("class subset must not be empty"));
        }
        if let Some(&label) = classes.iter().find(|&&c| c >= self.num_classes) {
            return Err(Error::Label {
                label,
                num_classes: self.num_classes,
            });
        }
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        Ok(self.select(&idx))
    }

    /// Batch of pixel images and labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (self.images.select(indices), indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Index batches in order, or in a seeded random order.
    pub fn batches<R: Rng>(&self, batch: usize, rng: Option<&mut R>) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(rng) = rng {
            order.shuffle(rng);
        }
        order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
    }

    /// Per-channel pixel mean and standard deviation over the whole set.
    pub fn channel_stats(&self) -> Normalization {
        let [n, c, h, w] = self.images.shape();
        let plane = h * w;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (idx, p) in self.images.data().chunks(plane).enumerate() {
            let ch = idx % c;
            for &v in p {
                sum[ch] += v as f64;
                sq[ch] += (v as f64) * (v as f64);
            }
        }
        let count = (n * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| libm::sqrt((q / count - m * m).max(1e-12)) as f32)
            .collect();
        Normalization {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std,
        }
    }

    /// Bilinear resampling of every image to `res x res`.
    pub fn resized(&self, res: usize) -> Dataset {
        let mut out = self.clone();
        out.images = crate::resize::resize_bilinear(&self.images, res, res);
        out
    }
}

/// How the random crop fills pixels shifted in from outside the image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PadMode {
    /// Black border, the usual choice for natural images.
    #[default]
    Zero,
    /// Mirror the image across its border (no constant border).
    Reflect,
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * (n - 1).max(1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Random crop from a padded image plus a random horizontal flip, in place.
pub fn augment<R: Rng>(pixels: &mut Tensor, pad: usize, mode: PadMode, rng: &mut R) {
    let [n, c, h, w] = pixels.shape();
    let mut buf = vec![0.0f32; c * h * w];
    for s in 0..n {
        let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let flip = rng.random_bool(0.5);
        let img = pixels.sample_mut(s);
        for ch in 0..c {
            for y in 0..h {
                let sy = y as isize + dy;
                for x in 0..w {
                    let xo = if flip { w - 1 - x } else { x };
                    let sx = xo as isize + dx;
                    let inside = sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w;
                    buf[(ch * h + y) * w + x] = match (inside, mode) {
                        (true, _) => img[(ch * h + sy as usize) * w + sx as usize],
                        (false, PadMode::Zero) => 0.0,
                        (false, PadMode::Reflect) => img[(ch * h + reflect(sy, h)) * w + reflect(sx, w)],
                    };
                }
            }
        }
        img.copy_from_slice(&buf);
    }
}

/// Procedural stand-in for a small natural-image classification task.
///
/// Each class is a plaid of two gratings at orientations `+theta` and `-theta`
/// (so horizontal flips keep the class) with low amplitude, laid over a
/// random smooth background and pixel noise. The class signal is weak in
/// `L_inf` terms, so unhardened networks are easy to attack. `task` selects a
/// disjoint family of gratings, giving a second task over the same input space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub resolution: usize,
    pub train_size: usize,
    pub test_size: usize,
    #[serde(default)]
    pub task: u32,
    #[serde(default = "SyntheticSpec::default_amplitude")]
    pub amplitude: f32,
    #[serde(default = "SyntheticSpec::default_noise")]
    pub noise: f32,
    pub seed: u64,
}

impl SyntheticSpec {
    fn default_amplitude() -> f32 {
        0.08
    }

    fn default_noise() -> f32 {
        0.02
    }

    pub fn new(num_classes: usize, resolution: usize, train_size: usize, test_size: usize, seed: u64) -> Self {
        SyntheticSpec {
            num_classes,
            resolution,
            train_size,
            test_size,
            task: 0,
            amplitude: Self::default_amplitude(),
            noise: Self::default_noise(),
            seed,
        }
    }

    /// (orientation, cycles per image) for class `c`.
    fn grating(&self, c: usize) -> (f32, f32) {
        let per_band = self.num_classes.div_ceil(2);
        let band = c / per_band;
        let slot = c % per_band;
        // orientations in [0, 90] degrees; the second family sits in between
        let theta = if self.task % 2 == 1 {
            0.5 * PI * (slot as f32 + 0.5) / per_band as f32
        } else {
            0.5 * PI * slot as f32 / (per_band - 1).max(1) as f32
        };
        let base = self.resolution as f32 / 8.0;
        let cycles = base * if self.task % 2 == 1 { [1.5, 2.5][band] } else { [2.0, 3.0][band] };
        (theta, cycles)
    }

    /// Train and test sets drawn from disjoint random streams.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        if self.num_classes < 2 || self.resolution < 4 {
            return Err(Error::config("synthetic data needs >= 2 classes and resolution >= 4"));
        }
        let name = alloc::format!("synthetic-t{}", self.task);
        let train = self.draw(self.train_size, self.seed.wrapping_mul(2).wrapping_add(1), &name)?;
        let test = self.draw(self.test_size, self.seed.wrapping_mul(2).wrapping_add(2), &name)?;
        Ok((train, test))
    }

    fn draw(&self, n: usize, stream: u64, name: &str) -> Result<Dataset> {
        let r = self.resolution;
        let mut rng = ChaCha8Rng::seed_from_u64(stream ^ ((self.task as u64) << 48));
        let noise = Normal::new(0.0f32, self.noise.max(0.0)).map_err(|_| Error::config("noise"))?;
        let mut images = Tensor::zeros([n, 3, r, r]);
        let mut labels = Vec::with_capacity(n);
        for s in 0..n {
            let label = s % self.num_classes;
            labels.push(label);
            let (theta, cycles) = self.grating(label);
            let (ct, st) = (libm::cosf(theta), libm::sinf(theta));
            let phase = rng.random_range(0.0..2.0 * PI);
            let phase2 = rng.random_range(0.0..2.0 * PI);
            let tint: [f32; 3] = core::array::from_fn(|_| rng.random_range(0.6..1.0));
            let base: [f32; 3] = core::array::from_fn(|_| rng.random_range(0.35..0.65));
            // one smooth blob per image: a single low-frequency plane wave
            let bt = rng.random_range(0.0..2.0 * PI);
            let bphase = rng.random_range(0.0..2.0 * PI);
            let bamp = rng.random_range(0.0..0.1);
            let bcol: [f32; 3] = core::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let img = images.sample_mut(s);
            for y in 0..r {
                for x in 0..r {
                    let (u, v) = (x as f32 / r as f32, y as f32 / r as f32);
                    let g = 0.5
                        * (libm::sinf(2.0 * PI * cycles * (u * ct + v * st) + phase)
                            + libm::sinf(2.0 * PI * cycles * (u * ct - v * st) + phase2));
                    let b = libm::cosf(2.0 * PI * (u * libm::cosf(bt) + v * libm::sinf(bt)) + bphase);
                    for ch in 0..3 {
                        let val = base[ch] + self.amplitude * tint[ch] * g + bamp * bcol[ch] * b + noise.sample(&mut rng);
                        img[(ch * r + y) * r + x] = val.clamp(0.0, 1.0);
                    }
                }
            }
        }
        // interleaved labels would leak order into unshuffled batches
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let images = images.select(&order);
        let labels = order.iter().map(|&i| labels[i]).collect();
        Dataset::new(name, images, labels, self.num_classes)
    }
}
