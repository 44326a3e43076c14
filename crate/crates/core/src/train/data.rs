//! Procedural image classification task used in place of ImageNet.
//!
//! Each class is a texture or shape family drawn with random phase, frequency
//! jitter, placement and colour tint, plus Gaussian pixel noise. Ten base
//! patterns exist; class `c >= 10` reuses pattern `c % 10` at a higher spatial
//! frequency. Pixel values lie roughly in `[-1.5, 1.5]`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Element, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Element> {
    /// `[N, H, W, 3]`.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<T: Element> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>), TensorError> {
        Ok((
            self.images.gather_batch(indices)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    pub fn cast<U: Element>(&self) -> Dataset<U> {
        Dataset {
            images: self.images.cast(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        }
    }
}

/// Generator settings; part of a run config so results are reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub samples_per_class: usize,
    pub seed: u64,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
}

fn default_noise() -> f64 {
    0.2
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            samples_per_class: 32,
            seed: 7,
            noise: default_noise(),
        }
    }
}

pub const PATTERN_NAMES: [&str; 10] = [
    "horizontal stripes",
    "vertical stripes",
    "diagonal stripes",
    "anti-diagonal stripes",
    "checkerboard",
    "concentric rings",
    "disk",
    "cross",
    "cross-hatch",
    "square outline",
];

/// `samples_per_class` images of every class, interleaved by class
/// (labels `0, 1, .., K-1, 0, 1, ..`). Deterministic in `seed`.
pub fn synthetic_dataset<T: Element>(
    num_classes: usize,
    samples_per_class: usize,
    image_size: usize,
    seed: u64,
) -> Dataset<T> {
    synthetic_dataset_with_noise(num_classes, samples_per_class, image_size, seed, default_noise())
}

pub fn synthetic_dataset_with_noise<T: Element>(
    num_classes: usize,
    samples_per_class: usize,
    image_size: usize,
    seed: u64,
    noise: f64,
) -> Dataset<T> {
    assert!(num_classes > 0 && samples_per_class > 0 && image_size > 0, "dataset sizes must be positive");
    let n = num_classes * samples_per_class;
    let s = image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixel_noise = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let mut data = Vec::with_capacity(n * s * s * 3);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % num_classes;
        labels.push(class);
        let draw = PatternDraw::sample(class, s, &mut rng);
        for y in 0..s {
            for x in 0..s {
                let v = draw.value(x as f64 / s as f64, y as f64 / s as f64);
                for tint in draw.tint {
                    let noisy = tint * v + pixel_noise.sample(&mut rng);
                    data.push(T::from_f64_lossy(noisy));
                }
            }
        }
    }
    Dataset {
        images: Tensor::new(&[n, s, s, 3], data).expect("sizes are consistent"),
        labels,
        num_classes,
    }
}

struct PatternDraw {
    pattern: usize,
    freq: f64,
    phase: f64,
    cx: f64,
    cy: f64,
    size: f64,
    tint: [f64; 3],
}

impl PatternDraw {
    fn sample(class: usize, image_size: usize, rng: &mut ChaCha8Rng) -> Self {
        let octave = (class / 10) as f64;
        // about 3 to 4 periods across the image, never above a quarter of Nyquist
        let base = 3.0 * (1.0 + 0.5 * octave);
        let freq = (base * rng.gen_range(0.85..1.15)).min(image_size as f64 / 8.0).max(1.0);
        let tint = [rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0)];
        Self {
            pattern: class % 10,
            freq,
            phase: rng.gen_range(0.0..2.0 * PI),
            cx: rng.gen_range(0.35..0.65),
            cy: rng.gen_range(0.35..0.65),
            size: rng.gen_range(0.18..0.3),
            tint,
        }
    }

    /// Intensity in `[-1, 1]` at normalized coordinates.
    fn value(&self, x: f64, y: f64) -> f64 {
        let w = 2.0 * PI * self.freq;
        let wave = |t: f64| (w * t + self.phase).sin();
        let sign = |v: f64| if v >= 0.0 { 1.0 } else { -1.0 };
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.pattern {
            0 => wave(y),
            1 => wave(x),
            2 => wave((x + y) / 2f64.sqrt()),
            3 => wave((x - y) / 2f64.sqrt()),
            4 => sign(wave(x)) * sign((w * y + self.phase * 0.7).sin()),
            5 => wave((dx * dx + dy * dy).sqrt()),
            6 => {
                if (dx * dx + dy * dy).sqrt() < self.size {
                    1.0
                } else {
                    -1.0
                }
            }
            7 => {
                let arm = self.size / 2.5;
                if dx.abs() < arm || dy.abs() < arm {
                    1.0
                } else {
                    -1.0
                }
            }
            8 => wave(x).max(wave(y)),
            _ => {
                let d = dx.abs().max(dy.abs());
                if (d - self.size).abs() < 0.06 {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }
}
