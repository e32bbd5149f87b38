//! Binary netpbm grids of samples.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Width of the separator between tiles, in pixels.
pub const SEPARATOR: usize = 2;
const SEPARATOR_VALUE: u8 = 255;

/// `[-1, 1] → [0, 255]`, clamped and rounded. NaN maps to 0.
pub fn to_byte(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// `(width, height)` of a grid of `k` tiles of `h×w` in `cols` columns.
pub fn grid_dims(k: usize, cols: usize, h: usize, w: usize) -> (usize, usize) {
    let cols = cols.min(k).max(1);
    let rows = k.div_ceil(cols);
    (cols * w + (cols - 1) * SEPARATOR, rows * h + (rows - 1) * SEPARATOR)
}

/// Full P5 (one channel) or P6 (three channels) file contents.
pub fn encode_image_grid<F: Scalar>(samples: &Tensor<F>, cols: usize) -> Result<Vec<u8>> {
    if samples.ndim() != 4 || samples.dim(0) == 0 {
        return Err(Error::shape("write_image_grid", format!("expected [K>=1,C,H,W], got {:?}", samples.shape())));
    }
    let (k, c, h, w) = (samples.dim(0), samples.dim(1), samples.dim(2), samples.dim(3));
    let tag = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::InvalidArgument(format!("cannot write {c}-channel images (1 or 3 supported)"))),
    };
    if cols == 0 {
        return Err(Error::InvalidArgument("grid needs at least one column".into()));
    }
    let cols = cols.min(k);
    let (gw, gh) = grid_dims(k, cols, h, w);
    let mut pixels = vec![SEPARATOR_VALUE; gw * gh * c];
    let x = samples.data();
    for s in 0..k {
        let (ty, tx) = (s / cols, s % cols);
        let (oy, ox) = (ty * (h + SEPARATOR), tx * (w + SEPARATOR));
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    let v = x[((s * c + ch) * h + y) * w + xx].as_f64();
                    pixels[((oy + y) * gw + ox + xx) * c + ch] = to_byte(v);
                }
            }
        }
    }
    let mut out = format!("{tag}\n{gw} {gh}\n255\n").into_bytes();
    out.extend(pixels);
    Ok(out)
}

pub fn write_image_grid<F: Scalar>(samples: &Tensor<F>, cols: usize, path: &Path) -> Result<()> {
    let bytes = encode_image_grid(samples, cols)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
