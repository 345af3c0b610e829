//! Labeled data: the synthetic manifold generator, the IDX loader, the text
//! table format, and the class-disjoint task stream.

mod idx;
mod stream;
mod synthetic;
mod table;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, Tensor};

pub use idx::{load_idx, parse_idx_images, parse_idx_labels, write_idx_images, write_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use stream::{split_tasks, MemoryPolicy, Task, TaskProtocol, TaskStream};
pub use synthetic::{gen_synthetic_manifolds, SyntheticConfig};
pub use table::{read_table, write_table, TableData};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: wrong IDX magic number: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { path: String, expected: u32, found: u32 },
    #[error("{path}: truncated IDX file: header promises {expected} bytes, found {found}")]
    Truncated { path: String, expected: usize, found: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at row {row} is outside [0, {num_classes})")]
    LabelOutOfRange { row: usize, label: usize, num_classes: usize },
    #[error("class {class} has no samples in the {split:?} split")]
    MissingClass { class: usize, split: Split },
    #[error("non-finite value at row {row}")]
    NonFinite { row: usize },
    #[error("invalid protocol: {0}")]
    Protocol(String),
    #[error("invalid generator settings: {0}")]
    Generator(String),
    #[error("table parse error at line {line}: {message}")]
    Table { line: usize, message: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// `n × dim` samples with integer labels in `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub class_names: Option<Vec<String>>,
}

impl LabeledDataset {
    pub fn new(samples: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self, DatasetError> {
        if samples.rows() != labels.len() || samples.shape().len() != 2 {
            return Err(DatasetError::CountMismatch {
                images: samples.rows(),
                labels: labels.len(),
            });
        }
        for (row, &label) in labels.iter().enumerate() {
            if label >= num_classes {
                return Err(DatasetError::LabelOutOfRange {
                    row,
                    label,
                    num_classes,
                });
            }
        }
        for row in 0..samples.rows() {
            if samples.row(row).iter().any(|v| !v.is_finite()) {
                return Err(DatasetError::NonFinite { row });
            }
        }
        Ok(Self {
            samples,
            labels,
            num_classes,
            split,
            class_names: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.samples.row(i)
    }

    /// Row indices whose label is in `classes`, in dataset order.
    pub fn indices_of(&self, classes: &[usize]) -> Vec<usize> {
        (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Copies the listed rows into `(samples, labels)`.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.samples.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Train and test splits over the same label space.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPair {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

impl DatasetPair {
    /// Checks that the splits agree on dimension and class count and that
    /// every class appears in both.
    pub fn new(mut train: LabeledDataset, mut test: LabeledDataset) -> Result<Self, DatasetError> {
        if train.dim() != test.dim() {
            return Err(DatasetError::Numerics(NumericsError::ShapeMismatch {
                op: "dataset_pair",
                left: train.samples.shape().to_vec(),
                right: test.samples.shape().to_vec(),
            }));
        }
        let num_classes = train.num_classes.max(test.num_classes);
        train.num_classes = num_classes;
        test.num_classes = num_classes;
        for ds in [&train, &test] {
            for (class, &count) in ds.class_counts().iter().enumerate() {
                if count == 0 {
                    return Err(DatasetError::MissingClass { class, split: ds.split });
                }
            }
        }
        Ok(Self { train, test })
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }
}
