//! Labeled image datasets: synthetic stand-ins and a CIFAR-10 binary loader.

mod cifar;
mod synthetic;

pub use cifar::{load_cifar10, parse_cifar10_records, CIFAR10_RECORD_LEN};
pub use synthetic::{
    gen_classification_dataset, gen_classification_with, gen_segmentation_dataset, gen_segmentation_with,
    ClassificationParams, SegmentationParams, MAX_FOREGROUND, MIN_FOREGROUND,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Classification,
    Segmentation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// How a dataset was produced; serialized into reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetDescriptor {
    SyntheticClassification {
        seed: u64,
        n_per_class: usize,
        classes: usize,
        size: usize,
    },
    SyntheticSegmentation {
        seed: u64,
        n: usize,
        size: usize,
    },
    Cifar10 {
        path: String,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    /// `N x 1 x H x W`, values exactly 0 or 1.
    Masks(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub kind: DatasetKind,
    pub images: Tensor,
    pub targets: Targets,
    pub split: Split,
    pub descriptor: DatasetDescriptor,
}

impl LabeledDataset {
    pub fn new(
        images: Tensor,
        targets: Targets,
        split: Split,
        descriptor: DatasetDescriptor,
    ) -> Result<Self> {
        let n = images.shape().n;
        let kind = match &targets {
            Targets::Classes(labels) => {
                if labels.len() != n {
                    return Err(Error::data(format!("{n} images but {} labels", labels.len())));
                }
                DatasetKind::Classification
            }
            Targets::Masks(masks) => {
                let s = images.shape();
                if masks.shape() != Shape::new(n, 1, s.h, s.w) {
                    return Err(Error::data(format!(
                        "masks {} do not match images {s}",
                        masks.shape()
                    )));
                }
                DatasetKind::Segmentation
            }
        };
        Ok(Self {
            kind,
            images,
            targets,
            split,
            descriptor,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape().n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Images and targets of the listed samples.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, BatchTargets) {
        let images = self.images.gather_batch(indices);
        let targets = match &self.targets {
            Targets::Classes(l) => BatchTargets::Classes(indices.iter().map(|&i| l[i]).collect()),
            Targets::Masks(m) => BatchTargets::Masks(m.gather_batch(indices)),
        };
        (images, targets)
    }

    /// Reorders samples; used to check order invariance of metrics.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let (images, targets) = self.batch(order);
        Self {
            kind: self.kind,
            images,
            targets: match targets {
                BatchTargets::Classes(l) => Targets::Classes(l),
                BatchTargets::Masks(m) => Targets::Masks(m),
            },
            split: self.split,
            descriptor: self.descriptor.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub enum BatchTargets {
    Classes(Vec<usize>),
    Masks(Tensor),
}

/// Per-channel mean and standard deviation over every pixel of `images`.
pub fn channel_stats(images: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = images.shape();
    let mut sum = vec![0.0f64; s.c];
    let mut sq = vec![0.0f64; s.c];
    for (i, plane) in images.data().chunks(s.plane()).enumerate() {
        let k = i % s.c;
        for &v in plane {
            sum[k] += v as f64;
            sq[k] += (v as f64) * (v as f64);
        }
    }
    let count = (s.n * s.plane()) as f64;
    let mean: Vec<f64> = sum.iter().map(|v| v / count).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / count - m * m).max(1e-12).sqrt())
        .collect();
    (mean, std)
}

/// Applies `(x - mean) / std` per channel in place.
pub fn normalize_channels(images: &mut Tensor, mean: &[f64], std: &[f64]) {
    let s = images.shape();
    for (i, plane) in images.data_mut().chunks_mut(s.plane()).enumerate() {
        let k = i % s.c;
        let (m, sd) = (mean[k] as f32, std[k] as f32);
        plane.iter_mut().for_each(|v| *v = (*v - m) / sd);
    }
}
