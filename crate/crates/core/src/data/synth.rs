//! Procedural datasets for desk-scale training.

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{streams, RngStream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// One to three Gaussian bumps at random centres.
    Blobs,
    /// One of two fixed templates plus pixel noise.
    TwoMode,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(SynthKind::Blobs),
            "two_mode" => Ok(SynthKind::TwoMode),
            other => Err(Error::Config(format!("unknown synthetic dataset `{other}` (blobs, two_mode)"))),
        }
    }
}

impl std::fmt::Display for SynthKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SynthKind::Blobs => "blobs",
            SynthKind::TwoMode => "two_mode",
        })
    }
}

/// The two `two_mode` templates: a centred square and a diagonal cross.
pub fn two_mode_templates(size: usize) -> [Vec<f32>; 2] {
    let q = size / 4;
    let square = (0..size * size)
        .map(|i| {
            let (y, x) = (i / size, i % size);
            if (q..size - q).contains(&y) && (q..size - q).contains(&x) { 1.0 } else { -1.0 }
        })
        .collect();
    let cross = (0..size * size)
        .map(|i| {
            let (y, x) = (i / size, i % size);
            if y == x || y + x == size - 1 { 1.0 } else { -1.0 }
        })
        .collect();
    [square, cross]
}

fn blob_image(size: usize, rng: &mut RngStream) -> Vec<f32> {
    let bumps = 1 + rng.below(3) as usize;
    let width = size as f64 / 8.0 + 0.5;
    let centres: Vec<(f64, f64)> = (0..bumps)
        .map(|_| (rng.uniform() * size as f64, rng.uniform() * size as f64))
        .collect();
    (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
            let v: f64 = centres
                .iter()
                .map(|&(cy, cx)| (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * width * width)).exp())
                .sum();
            (2.0 * v.min(1.0) - 1.0) as f32
        })
        .collect()
}

/// `n` single-channel `size×size` images, deterministic in `seed`, clamped to `[-1, 1]`.
pub fn synth_dataset(kind: SynthKind, n: usize, size: usize, seed: u64, noise: f64) -> Result<Dataset> {
    if n == 0 || size < 4 {
        return Err(Error::Config(format!("synthetic dataset needs n >= 1 and size >= 4, got n={n} size={size}")));
    }
    if !(noise >= 0.0) {
        return Err(Error::Config(format!("noise {noise} must be non-negative")));
    }
    let mut rng = RngStream::new(seed, streams::DATA);
    let templates = two_mode_templates(size);
    let mut data = Vec::with_capacity(n * size * size);
    for _ in 0..n {
        match kind {
            SynthKind::Blobs => data.extend(blob_image(size, &mut rng)),
            SynthKind::TwoMode => {
                let t = &templates[rng.below(2) as usize];
                if noise == 0.0 {
                    data.extend_from_slice(t);
                } else {
                    data.extend(t.iter().map(|&v| (v as f64 + noise * rng.normal()).clamp(-1.0, 1.0) as f32));
                }
            }
        }
    }
    Dataset::new(Tensor::from_vec(&[n, 1, size, size], data)?, None, format!("synthetic:{kind}"))
}
