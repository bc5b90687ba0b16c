//! IDX dataset files: the big-endian binary format of the MNIST distribution.
//!
//! Image files carry magic 2051 and dimensions `[N, H, W]` of unsigned bytes;
//! label files carry magic 2049 and `N` class bytes. Gzip-compressed files
//! (as served by the canonical mirrors) are detected by their leading magic
//! and decompressed transparently; writing always emits the raw format, so a
//! load→write round trip of an uncompressed file is byte-identical.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

/// Raw contents of an IDX image file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major `count × height × width` grayscale bytes.
    pub pixels: Vec<u8>,
}

impl IdxImages {
    /// `[N, H, W]` tensor with values in `[0, 255]`.
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::new(
            vec![self.count, self.height, self.width],
            self.pixels.iter().map(|&b| S::from_f64_lossy(b as f64)).collect(),
        )
        .expect("pixel count was validated at load")
    }
}

/// Either kind of IDX payload, discriminated by the file's magic.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum IdxFile {
    Images(IdxImages),
    Labels(Vec<u8>),
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        return Ok(out);
    }
    Ok(raw)
}

fn be_u32(bytes: &[u8], at: usize, what: &str, path: &Path) -> Result<u32> {
    let end = at + 4;
    if bytes.len() < end {
        return Err(Error::Integrity(format!(
            "{}: header too short for {what}",
            path.display()
        )));
    }
    Ok(u32::from_be_bytes(bytes[at..end].try_into().expect("4 bytes")))
}

/// Parses an IDX file (gzip-compressed or raw), dispatching on its magic.
pub fn load_idx(path: &Path) -> Result<IdxFile> {
    let bytes = read_maybe_gzip(path)?;
    let magic = be_u32(&bytes, 0, "magic", path)?;
    match magic {
        IMAGE_MAGIC => {
            let count = be_u32(&bytes, 4, "image count", path)? as usize;
            let height = be_u32(&bytes, 8, "height", path)? as usize;
            let width = be_u32(&bytes, 12, "width", path)? as usize;
            let payload = &bytes[16..];
            let want = count * height * width;
            if payload.len() != want {
                return Err(Error::Integrity(format!(
                    "{}: declares {count}×{height}×{width} = {want} pixel bytes, found {}",
                    path.display(),
                    payload.len()
                )));
            }
            Ok(IdxFile::Images(IdxImages {
                count,
                height,
                width,
                pixels: payload.to_vec(),
            }))
        }
        LABEL_MAGIC => {
            let count = be_u32(&bytes, 4, "label count", path)? as usize;
            let payload = &bytes[8..];
            if payload.len() != count {
                return Err(Error::Integrity(format!(
                    "{}: declares {count} labels, found {} bytes",
                    path.display(),
                    payload.len()
                )));
            }
            Ok(IdxFile::Labels(payload.to_vec()))
        }
        other => Err(Error::Integrity(format!(
            "{}: bad IDX magic {other} (expected {IMAGE_MAGIC} or {LABEL_MAGIC})",
            path.display()
        ))),
    }
}

/// Loads an image file, rejecting label files.
pub fn load_idx_images(path: &Path) -> Result<IdxImages> {
    match load_idx(path)? {
        IdxFile::Images(images) => Ok(images),
        IdxFile::Labels(_) => Err(Error::Integrity(format!(
            "{}: expected an image file, found labels",
            path.display()
        ))),
    }
}

/// Loads a label file, rejecting image files.
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    match load_idx(path)? {
        IdxFile::Labels(labels) => Ok(labels),
        IdxFile::Images(_) => Err(Error::Integrity(format!(
            "{}: expected a label file, found images",
            path.display()
        ))),
    }
}

/// Serializes images to the raw (uncompressed) IDX byte layout.
pub fn idx_image_bytes(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.count as u32).to_be_bytes());
    out.extend_from_slice(&(images.height as u32).to_be_bytes());
    out.extend_from_slice(&(images.width as u32).to_be_bytes());
    out.extend_from_slice(&images.pixels);
    out
}

/// Serializes labels to the raw (uncompressed) IDX byte layout.
pub fn idx_label_bytes(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_idx_images(path: &Path, images: &IdxImages) -> Result<()> {
    fs::write(path, idx_image_bytes(images))?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    fs::write(path, idx_label_bytes(labels))?;
    Ok(())
}
