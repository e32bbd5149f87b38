//! IDX reader (the MNIST distribution format): big-endian header, then raw bytes.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated { what: format!("{what} header"), needed: at + 4, available: bytes.len() })
}

fn payload<'a>(bytes: &'a [u8], header: usize, len: usize, what: &str) -> Result<&'a [u8]> {
    let needed = header + len;
    match bytes.len().cmp(&needed) {
        std::cmp::Ordering::Less => Err(Error::Truncated { what: format!("{what} payload"), needed, available: bytes.len() }),
        std::cmp::Ordering::Greater => Err(Error::DimMismatch(format!(
            "{what}: header declares {len} payload bytes but file carries {}",
            bytes.len() - header
        ))),
        std::cmp::Ordering::Equal => Ok(&bytes[header..]),
    }
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, "IDX images")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::BadMagic { what: "IDX images", expected: IMAGES_MAGIC, found: magic });
    }
    let count = be_u32(bytes, 4, "IDX images")? as usize;
    let rows = be_u32(bytes, 8, "IDX images")? as usize;
    let cols = be_u32(bytes, 12, "IDX images")? as usize;
    if count == 0 || rows == 0 || cols == 0 {
        return Err(Error::DimMismatch(format!("IDX images with dims ({count},{rows},{cols})")));
    }
    let len = count
        .checked_mul(rows * cols)
        .ok_or_else(|| Error::DimMismatch("IDX image dims overflow".into()))?;
    let pixels = payload(bytes, 16, len, "IDX images")?.to_vec();
    Ok(IdxImages { count, rows, cols, pixels })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "IDX labels")?;
    if magic != LABELS_MAGIC {
        return Err(Error::BadMagic { what: "IDX labels", expected: LABELS_MAGIC, found: magic });
    }
    let count = be_u32(bytes, 4, "IDX labels")? as usize;
    Ok(payload(bytes, 8, count, "IDX labels")?.to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads IDX images (and optionally labels), mapping bytes to `x/127.5 − 1`.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let img = parse_idx_images(&read(images_path)?)?;
    let labels = labels_path.map(|p| read(p).and_then(|b| parse_idx_labels(&b))).transpose()?;
    if let Some(l) = &labels {
        if l.len() != img.count {
            return Err(Error::DimMismatch(format!("{} labels for {} images", l.len(), img.count)));
        }
    }
    let data = img.pixels.iter().map(|&p| p as f32 / 127.5 - 1.0).collect();
    let images = Tensor::from_vec(&[img.count, 1, img.rows, img.cols], data)?;
    Dataset::new(images, labels, images_path.display().to_string())
}
