//! Image datasets, augmentation and batching.
//!
//! Images are 3x32x32 and stored as bytes; a pixel byte `v` is the value
//! `v / 255`. CIFAR-10 binary batches and the synthetic sets share this
//! layout, so either can be written back out as binary records.

pub mod augment;
pub mod cifar;
pub mod loader;
pub mod synthetic;

use std::path::PathBuf;

use thiserror::Error;

pub use augment::{AugmentConfig, NORM_MEAN, NORM_STD};
pub use cifar::{load_cifar10, load_cifar10_test, parse_records, read_records, write_records, RECORD_BYTES};
pub use loader::{eval_batches, Batch, BatchStream, LoaderConfig, Prefetcher};
pub use synthetic::{synthetic_dataset, SyntheticKind};

pub const CHANNELS: usize = 3;
pub const SIDE: usize = 32;
pub const PLANE: usize = SIDE * SIDE;
pub const IMAGE_BYTES: usize = CHANNELS * PLANE;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: truncated record at byte offset {offset} (file is {len} bytes, records are {record} bytes)")]
    Truncated {
        path: PathBuf,
        offset: u64,
        len: u64,
        record: usize,
    },
    #[error("{path}: label {label} of record {index} is not below {classes}")]
    BadLabel {
        path: PathBuf,
        index: usize,
        label: u8,
        classes: usize,
    },
    #[error("{0}: no training batches (expected data_batch_1.bin ... data_batch_5.bin)")]
    Missing(PathBuf),
    #[error("unknown dataset `{0}`")]
    Unknown(String),
    #[error("dataset is empty")]
    Empty,
    #[error("{0}")]
    Invalid(String),
}

/// Labelled 3x32x32 byte images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    classes: usize,
}

impl Dataset {
    pub fn new(pixels: Vec<u8>, labels: Vec<u8>, classes: usize) -> Result<Self, DataError> {
        if pixels.len() != labels.len() * IMAGE_BYTES {
            return Err(DataError::Invalid(format!(
                "{} pixel bytes for {} labels",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= classes) {
            return Err(DataError::Invalid(format!("label {l} of example {i} is not below {classes}")));
        }
        Ok(Self { pixels, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Planar RGB bytes of example `i`.
    pub fn image_bytes(&self, i: usize) -> &[u8] {
        &self.pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }

    /// Example `i` scaled to `[0, 1]`.
    pub fn image(&self, i: usize) -> Vec<f32> {
        self.image_bytes(i).iter().map(|&v| v as f32 / 255.0).collect()
    }

    /// The first `n` examples.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Self {
            pixels: self.pixels[..n * IMAGE_BYTES].to_vec(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        }
    }

    pub fn concat(parts: Vec<Dataset>) -> Result<Dataset, DataError> {
        let classes = parts.iter().map(|d| d.classes).max().unwrap_or(0);
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            pixels.extend(p.pixels);
            labels.extend(p.labels);
        }
        Dataset::new(pixels, labels, classes)
    }
}
