//! IDX image/label files, optionally gzip-compressed.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;

use super::{BaseData, EnvError};
use crate::ndcore::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_bytes(path: &Path) -> Result<Vec<u8>, EnvError> {
    let raw = std::fs::read(path).map_err(|source| EnvError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|source| EnvError::Io {
                path: path.display().to_string(),
                source,
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, EnvError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| EnvError::Truncated {
            path: path.display().to_string(),
            expected: at + 4,
            actual: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<(), EnvError> {
    let observed = be_u32(bytes, 0, path)?;
    if observed != expected {
        return Err(EnvError::BadMagic {
            path: path.display().to_string(),
            expected,
            observed,
        });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], header: usize, len: usize, path: &Path) -> Result<&'a [u8], EnvError> {
    bytes
        .get(header..header + len)
        .ok_or_else(|| EnvError::Truncated {
            path: path.display().to_string(),
            expected: header + len,
            actual: bytes.len(),
        })
}

/// Images as `[N, rows * cols]` with pixels scaled by 1/255.
pub fn read_idx_images(path: &Path) -> Result<Tensor, EnvError> {
    let bytes = read_bytes(path)?;
    check_magic(&bytes, IMAGES_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let d = rows * cols;
    let pixels = payload(&bytes, 16, n * d, path)?;
    let data = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Tensor::new(vec![n, d], data).expect("sized from header"))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>, EnvError> {
    let bytes = read_bytes(path)?;
    check_magic(&bytes, LABELS_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    Ok(payload(&bytes, 8, n, path)?.iter().map(|&b| b as usize).collect())
}

/// Loads a matched image/label pair.
pub fn load_idx_images(images: &Path, labels: &Path) -> Result<BaseData, EnvError> {
    let x = read_idx_images(images)?;
    let y = read_idx_labels(labels)?;
    if x.rows() != y.len() {
        return Err(EnvError::CountMismatch {
            images: x.rows(),
            labels: y.len(),
        });
    }
    BaseData::new(x, y)
}

/// Writes uncompressed IDX images; `pixels` holds `n * rows * cols` bytes.
pub fn write_idx_images(mut out: impl Write, n: usize, rows: usize, cols: usize, pixels: &[u8]) -> std::io::Result<()> {
    assert_eq!(pixels.len(), n * rows * cols, "pixel count");
    out.write_all(&IMAGES_MAGIC.to_be_bytes())?;
    for v in [n, rows, cols] {
        out.write_all(&(v as u32).to_be_bytes())?;
    }
    out.write_all(pixels)
}

pub fn write_idx_labels(mut out: impl Write, labels: &[u8]) -> std::io::Result<()> {
    out.write_all(&LABELS_MAGIC.to_be_bytes())?;
    out.write_all(&(labels.len() as u32).to_be_bytes())?;
    out.write_all(labels)
}
