//! CIFAR-10 binary batches: records of one label byte then 3072 pixel bytes (R, G, B planes).

use std::path::Path;

use super::{byte_to_unit, LabeledDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

const BATCHES: [&str; 6] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
    "test_batch.bin",
];

/// Decodes whole records, appending pixels and labels.
pub fn parse_cifar_records(bytes: &[u8], path: &Path, pixels: &mut Vec<f64>, labels: &mut Vec<usize>) -> Result<()> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: whole as u64,
            reason: format!("{} bytes is not a positive multiple of the {CIFAR_RECORD}-byte record", bytes.len()),
        });
    }
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (r * CIFAR_RECORD) as u64,
                reason: format!("label byte {} outside 0..=9", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| byte_to_unit(b)));
    }
    Ok(())
}

/// Loads the five training batches and the test batch from `dir`.
pub fn load_cifar10_binary(dir: impl AsRef<Path>) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let (mut pixels, mut labels) = (Vec::new(), Vec::new());
    for name in BATCHES {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        parse_cifar_records(&bytes, &path, &mut pixels, &mut labels)?;
    }
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], pixels)?;
    LabeledDataset::new("cifar10", images, labels, 10)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_precedes_pixels() {
        let mut rec = vec![7u8];
        rec.extend((0..3072).map(|i| (i % 256) as u8));
        let (mut px, mut lb) = (Vec::new(), Vec::new());
        parse_cifar_records(&rec, Path::new("f"), &mut px, &mut lb).unwrap();
        assert_eq!(lb, vec![7]);
        assert_eq!(px.len(), 3072);
        assert_eq!(px[1], 1.0 / 255.0);
        // green plane starts at 1024
        assert_eq!(px[1024], 0.0);
    }

    #[test]
    fn short_batch_is_an_error() {
        let (mut px, mut lb) = (Vec::new(), Vec::new());
        let r = parse_cifar_records(&[0u8; CIFAR_RECORD + 10], Path::new("f"), &mut px, &mut lb);
        assert!(matches!(r, Err(Error::Format { offset, .. }) if offset == CIFAR_RECORD as u64));
    }

    #[test]
    fn missing_directory_is_an_error() {
        assert!(matches!(load_cifar10_binary("/nonexistent/cifar"), Err(Error::Io { .. })));
    }
}
