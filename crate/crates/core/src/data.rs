//! Labeled example sets in the layout the trainer consumes: one feature
//! row per example, one class label per row.

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("{features} feature rows but {labels} labels")]
    CountMismatch { features: usize, labels: usize },
    #[error("label {label} at row {row} exceeds {n_classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: u8,
        n_classes: usize,
    },
    #[error("dataset is empty")]
    Empty,
}

/// A labeled dataset held in memory. Feature rows are contiguous, so per
/// example access is a slice.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<u8>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<u8>, n_classes: usize) -> Result<Self, DataError> {
        if features.nrows() != labels.len() {
            return Err(DataError::CountMismatch {
                features: features.nrows(),
                labels: labels.len(),
            });
        }
        if labels.is_empty() {
            return Err(DataError::Empty);
        }
        for (row, &label) in labels.iter().enumerate() {
            if usize::from(label) >= n_classes {
                return Err(DataError::LabelOutOfRange {
                    row,
                    label,
                    n_classes,
                });
            }
        }
        Ok(Dataset {
            features,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn example(&self, i: usize) -> (&[f64], usize) {
        let row = self
            .features
            .row(i)
            .to_slice()
            .expect("features are standard layout");
        (row, usize::from(self.labels[i]))
    }

    /// Keeps only the first `n` examples; handy for desk-scale runs.
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            features: self.features.slice(ndarray::s![..n, ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
            n_classes: self.n_classes,
        }
    }
}
