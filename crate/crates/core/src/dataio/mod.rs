//! Dataset ingestion, non-IID partitioning and image output.

mod cifar;
mod idx;
mod partition;
mod pnm;
pub mod synthetic;

pub use cifar::{load_cifar10_binary, parse_cifar_records, CIFAR_RECORD};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels, write_idx_images, write_idx_labels};
pub use partition::{dirichlet_partition, Partition};
pub use pnm::{load_image_dir, read_pnm, resize_bilinear, write_image_grid, write_pnm};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images `(N, C, H, W)` in `[0, 1]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub name: String,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(name: impl Into<String>, images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::shape("LabeledDataset", "[N, C, H, W]", format!("{:?}", images.shape())));
        }
        if images.batch() != labels.len() {
            return Err(Error::shape(
                "LabeledDataset",
                format!("{} labels", images.batch()),
                format!("{} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside [0, {num_classes})")));
        }
        if let Some(&bad) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel {bad} outside [0, 1]")));
        }
        Ok(LabeledDataset { images, labels, name: name.into(), num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<LabeledDataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!("index {bad} outside dataset of {} samples", self.len())));
        }
        Ok(LabeledDataset {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            name: self.name.clone(),
            num_classes: self.num_classes,
        })
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Where a dataset comes from; the `source` tag selects the loader.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    Idx { images: String, labels: String },
    Cifar10 { dir: String },
    ImageDir { dir: String, size: usize },
    SyntheticDigits { count: usize, size: usize, seed: u64 },
    SyntheticBlobs { count: usize, classes: usize, shape: [usize; 3], seed: u64 },
    SyntheticFaces { count: usize, size: usize, identities: usize, seed: u64 },
}

impl DatasetSource {
    pub fn load(&self) -> Result<LabeledDataset> {
        match self {
            DatasetSource::Idx { images, labels } => load_idx(images, labels),
            DatasetSource::Cifar10 { dir } => load_cifar10_binary(dir),
            DatasetSource::ImageDir { dir, size } => load_image_dir(dir, *size),
            DatasetSource::SyntheticDigits { count, size, seed } => synthetic::digits(*count, *size, *seed),
            DatasetSource::SyntheticBlobs { count, classes, shape, seed } => {
                synthetic::blobs(*count, *classes, *shape, *seed)
            }
            DatasetSource::SyntheticFaces { count, size, identities, seed } => {
                synthetic::faces(*count, *size, *identities, *seed)
            }
        }
    }

    /// Paths that must exist before a run starts.
    pub fn paths(&self) -> Vec<&str> {
        match self {
            DatasetSource::Idx { images, labels } => vec![images, labels],
            DatasetSource::Cifar10 { dir } | DatasetSource::ImageDir { dir, .. } => vec![dir],
            _ => Vec::new(),
        }
    }
}

pub(crate) fn byte_to_unit(b: u8) -> f64 {
    b as f64 / 255.0
}

pub(crate) fn unit_to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels_and_labels() {
        let img = Tensor::full(&[1, 1, 2, 2], 0.5);
        assert!(LabeledDataset::new("x", img.clone(), vec![3], 3).is_err());
        assert!(LabeledDataset::new("x", img.map(|v| v * 3.0), vec![0], 3).is_err());
        assert!(LabeledDataset::new("x", img, vec![2], 3).is_ok());
    }

    #[test]
    fn subset_keeps_order() {
        let img = Tensor::new(vec![3, 1, 1, 1], vec![0.0, 0.5, 1.0]).unwrap();
        let d = LabeledDataset::new("x", img, vec![0, 1, 2], 3).unwrap();
        let s = d.subset(&[2, 0]).unwrap();
        assert_eq!(s.labels, vec![2, 0]);
        assert_eq!(s.images.data(), &[1.0, 0.0]);
        assert!(d.subset(&[3]).is_err());
    }

    #[test]
    fn byte_scaling_endpoints() {
        assert_eq!(byte_to_unit(255), 1.0);
        assert_eq!(byte_to_unit(0), 0.0);
        assert_eq!(unit_to_byte(1.0), 255);
        assert_eq!(unit_to_byte(-0.2), 0);
    }
}
