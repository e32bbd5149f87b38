//! Datasets, image grids and checkpoints.

mod checkpoint;
mod idx;
mod image;
mod synth;

pub use checkpoint::{decode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_VERSION};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels, IdxImages};
pub use image::{encode_image_grid, grid_dims, to_byte, write_image_grid};
pub use synth::{synth_dataset, two_mode_templates, SynthKind};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images in `[-1, 1]`, shaped `[N, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Option<Vec<u8>>,
    pub source: String,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Option<Vec<u8>>, source: impl Into<String>) -> Result<Self> {
        if images.ndim() != 4 || images.dim(0) == 0 {
            return Err(Error::DimMismatch(format!("dataset images must be [N>=1,C,H,W], got {:?}", images.shape())));
        }
        if let Some(l) = &labels {
            if l.len() != images.dim(0) {
                return Err(Error::DimMismatch(format!("{} labels for {} images", l.len(), images.dim(0))));
            }
        }
        Ok(Self { images, labels, source: source.into() })
    }

    pub fn len(&self) -> usize {
        self.images.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_size(&self) -> usize {
        self.images.dim(2)
    }

    /// Copies the listed examples into one batch.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let per = self.images.len() / self.len();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("index {i} out of range for {} images", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Tensor::from_vec(&shape, data)
    }

    /// Center-pads with −1 up to `size`, or area-averages down to it.
    pub fn fit_to(&self, size: usize) -> Result<Self> {
        let (n, c, h, w) = (self.len(), self.images.dim(1), self.images.dim(2), self.images.dim(3));
        if h != w {
            return Err(Error::DimMismatch(format!("non-square images {h}x{w}")));
        }
        if size == h {
            return Ok(self.clone());
        }
        if size == 0 {
            return Err(Error::DimMismatch("target image size 0".into()));
        }
        let mut out = Vec::with_capacity(n * c * size * size);
        for plane in self.images.data().chunks(h * w) {
            if size > h {
                out.extend(pad_plane(plane, h, size));
            } else {
                out.extend(shrink_plane(plane, h, size));
            }
        }
        Dataset::new(Tensor::from_vec(&[n, c, size, size], out)?, self.labels.clone(), self.source.clone())
    }
}

fn pad_plane(plane: &[f32], h: usize, size: usize) -> Vec<f32> {
    let off = (size - h) / 2;
    let mut out = vec![-1.0; size * size];
    for y in 0..h {
        out[(y + off) * size + off..(y + off) * size + off + h].copy_from_slice(&plane[y * h..(y + 1) * h]);
    }
    out
}

/// Box-filter weights mapping `from` input cells onto `to` output cells.
fn area_weights(from: usize, to: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = from as f64 / to as f64;
    (0..to)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            (lo.floor() as usize..(hi.ceil() as usize).min(from))
                .map(|i| {
                    let cover = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    (i, cover / scale)
                })
                .filter(|&(_, wgt)| wgt > 0.0)
                .collect()
        })
        .collect()
}

fn shrink_plane(plane: &[f32], h: usize, size: usize) -> Vec<f32> {
    let wts = area_weights(h, size);
    let mut out = vec![0.0f32; size * size];
    for (oy, ry) in wts.iter().enumerate() {
        for (ox, rx) in wts.iter().enumerate() {
            let mut acc = 0.0;
            for &(iy, wy) in ry {
                for &(ix, wx) in rx {
                    acc += wy * wx * plane[iy * h + ix] as f64;
                }
            }
            out[oy * size + ox] = acc.clamp(-1.0, 1.0) as f32;
        }
    }
    out
}
