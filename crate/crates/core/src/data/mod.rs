//! Datasets: IDX image files, synthetic Gaussian blobs and CSV tables.

mod blobs;
mod idx;
mod table;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use blobs::gen_synthetic_blobs;
pub use idx::{load_idx, read_idx_images, read_idx_labels};
pub use table::load_csv_table;

/// Per-channel affine normalization `(x − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Normalizes `data` laid out as `[N, C, …]` with `per_channel` values per channel.
    pub fn apply(&self, data: &mut [f64], channels: usize, per_channel: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::Config(format!(
                "normalization has {} means and {} stds for {channels} channels",
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        for (i, v) in data.iter_mut().enumerate() {
            let c = (i / per_channel) % channels;
            *v = (*v - self.mean[c]) / self.std[c];
        }
        Ok(())
    }
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// IDX image/label file pair; pixels are scaled to `[0, 1]` before normalization.
    IdxImages {
        images: PathBuf,
        labels: PathBuf,
        classes: usize,
        #[serde(default)]
        normalization: Option<Normalization>,
    },
    /// `classes` Gaussian clusters in `dim` dimensions. Centers depend only on
    /// `seed`; `draw` selects an independent sample stream, so a train and a
    /// test split share centers but not points.
    SyntheticBlobs {
        classes: usize,
        samples: usize,
        dim: usize,
        spread: f64,
        seed: u64,
        #[serde(default)]
        draw: u64,
    },
    /// CSV with a header row; every column except `label_column` is a feature.
    CsvTable {
        path: PathBuf,
        classes: usize,
        #[serde(default = "default_label_column")]
        label_column: String,
        #[serde(default)]
        normalization: Option<Normalization>,
    },
}

fn default_label_column() -> String {
    "label".into()
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::IdxImages {
                images,
                labels,
                classes,
                normalization,
            } => load_idx(images, labels, *classes, normalization.as_ref()),
            DatasetSpec::SyntheticBlobs {
                classes,
                samples,
                dim,
                spread,
                seed,
                draw,
            } => gen_synthetic_blobs(*classes, *samples, *dim, *spread, *seed, *draw),
            DatasetSpec::CsvTable {
                path,
                classes,
                label_column,
                normalization,
            } => load_csv_table(path, *classes, label_column, normalization.as_ref()),
        }
    }
}

/// Features `[N, sample_shape…]` with integer labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.rank() < 2 || features.shape()[0] != labels.len() {
            return Err(Error::Structural(format!(
                "{} labels for features of shape {:?}",
                labels.len(),
                features.shape()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Structural(format!(
                "label {bad} outside [0, {classes})"
            )));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite {
                op: "dataset features".into(),
            });
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
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

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    /// Gathers the given sample indices into one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let width: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(&self.features.data()[i * width..(i + 1) * width]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("gathered shape"), labels)
    }

    /// Consecutive batches over `order`; the last one may be short.
    pub fn batches<'a>(
        &'a self,
        order: &'a [usize],
        size: usize,
    ) -> impl Iterator<Item = (Tensor, Vec<usize>)> + 'a {
        order.chunks(size.max(1)).map(move |c| self.batch(c))
    }

    pub fn sequential_order(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    pub fn shuffled_order<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let mut order = self.sequential_order();
        order.shuffle(rng);
        order
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        let (features, labels) = self.batch(&(0..n.min(self.len())).collect::<Vec<_>>());
        Dataset {
            features,
            labels,
            classes: self.classes,
        }
    }
}
