//! IDX files (the MNIST distribution format): big-endian magic, dims, raw bytes.

use std::path::Path;

use super::{byte_to_unit, LabeledDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const UBYTE: u8 = 0x08;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, offset: usize, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), offset: offset as u64, reason: reason.into() }
}

/// Parses the header; returns dims and the payload offset.
fn header(bytes: &[u8], path: &Path, want_dims: u8) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 4 {
        return Err(format_err(path, bytes.len(), "file ends inside the 4-byte magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_err(path, 0, format!("bad magic {:02x}{:02x}, expected 0000", bytes[0], bytes[1])));
    }
    if bytes[2] != UBYTE {
        return Err(format_err(path, 2, format!("element type 0x{:02x} unsupported, expected 0x08", bytes[2])));
    }
    if bytes[3] != want_dims {
        return Err(format_err(path, 3, format!("{} dimensions, expected {want_dims}", bytes[3])));
    }
    let mut dims = Vec::new();
    for d in 0..want_dims as usize {
        let at = 4 + 4 * d;
        let word = bytes.get(at..at + 4).ok_or_else(|| format_err(path, bytes.len(), "file ends inside the dimension header"))?;
        dims.push(u32::from_be_bytes(word.try_into().unwrap()) as usize);
    }
    let start = 4 + 4 * want_dims as usize;
    let need = start + dims.iter().product::<usize>();
    if bytes.len() < need {
        return Err(format_err(path, bytes.len(), format!("truncated: header promises {need} bytes")));
    }
    Ok((dims, start))
}

/// Images as `(N, 1, H, W)` in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let (dims, start) = header(bytes, path, 3)?;
    let n = dims.iter().product::<usize>();
    let data = bytes[start..start + n].iter().map(|&b| byte_to_unit(b)).collect();
    Tensor::new(vec![dims[0], 1, dims[1], dims[2]], data)
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let (dims, start) = header(bytes, path, 1)?;
    Ok(bytes[start..start + dims[0]].iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = parse_idx_images(&read(ip)?, ip)?;
    let labels = parse_idx_labels(&read(lp)?, lp)?;
    if labels.len() != images.batch() {
        return Err(Error::InvalidArgument(format!(
            "{} images in {} but {} labels in {}",
            images.batch(),
            ip.display(),
            labels.len(),
            lp.display()
        )));
    }
    let classes = labels.iter().max().map_or(1, |m| m + 1).max(10);
    let name = ip.file_name().map_or("idx".into(), |n| n.to_string_lossy().into_owned());
    LabeledDataset::new(name, images, labels, classes)
}

/// Inverse of [`parse_idx_images`] for single-channel `(N, 1, H, W)` tensors.
pub fn write_idx_images(images: &Tensor) -> Result<Vec<u8>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape("write_idx_images", "[N, 1, H, W]", format!("{s:?}")));
    }
    let mut out = vec![0, 0, UBYTE, 3];
    for d in [s[0], s[2], s[3]] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(images.data().iter().map(|&v| super::unit_to_byte(v)));
    Ok(out)
}

pub fn write_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = vec![0, 0, UBYTE, 1];
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}
