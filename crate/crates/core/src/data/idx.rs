use std::path::Path;

use super::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(offset as u64, "truncated header"))
}

fn check_magic(bytes: &[u8], want: u32) -> Result<()> {
    let magic = be_u32(bytes, 0)?;
    if magic != want {
        return Err(Error::format(
            0,
            format!("bad magic {magic:#010x}, expected {want:#010x}"),
        ));
    }
    Ok(())
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn read_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::format(
            (16 + body.len()) as u64,
            format!(
                "truncated payload: {need} pixels declared, {} present",
                body.len()
            ),
        ));
    }
    Ok((n, rows, cols, &body[..need]))
}

/// Parses an IDX label file.
pub fn read_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    check_magic(bytes, LABELS_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::format(
            (8 + body.len()) as u64,
            format!(
                "truncated payload: {n} labels declared, {} present",
                body.len()
            ),
        ));
    }
    Ok(&body[..n])
}

/// Loads an image/label pair as `[N, 1, rows, cols]` features.
pub fn load_idx(
    images: &Path,
    labels: &Path,
    classes: usize,
    norm: Option<&Normalization>,
) -> Result<Dataset> {
    let ib = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lb = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let (n, rows, cols, pixels) = read_idx_images(&ib)?;
    let ls = read_idx_labels(&lb)?;
    if ls.len() != n {
        return Err(Error::Structural(format!(
            "{n} images but {} labels",
            ls.len()
        )));
    }
    let mut data: Vec<f64> = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    if let Some(norm) = norm {
        norm.apply(&mut data, 1, rows * cols)?;
    }
    let features = Tensor::new(vec![n, 1, rows, cols], data)?;
    Dataset::new(
        features,
        ls.iter().map(|&l| usize::from(l)).collect(),
        classes,
    )
}
