//! CIFAR-10 binary batches: records of one label byte followed by 3072
//! channel-major pixel bytes (1024 red, 1024 green, 1024 blue, row-major 32x32).

use std::fs;
use std::path::Path;

use super::{channel_stats, normalize_channels, DatasetDescriptor, LabeledDataset, Split, Targets};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const CIFAR10_RECORD_LEN: usize = 1 + 3 * 32 * 32;
const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

/// Decodes raw records into images scaled to `[0, 1]` and labels.
pub fn parse_cifar10_records(bytes: &[u8]) -> Result<(Tensor, Vec<usize>)> {
    if bytes.len() % CIFAR10_RECORD_LEN != 0 {
        return Err(Error::format(format!(
            "{} bytes is not a whole number of {CIFAR10_RECORD_LEN}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR10_RECORD_LEN;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * 3072);
    for (i, rec) in bytes.chunks_exact(CIFAR10_RECORD_LEN).enumerate() {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::data(format!("record {i} has label {label}")));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((Tensor::from_vec(Shape::new(n, 3, 32, 32), pixels)?, labels))
}

fn read_file(path: &Path) -> Result<(Tensor, Vec<usize>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10_records(&bytes)
}

fn concat(parts: Vec<(Tensor, Vec<usize>)>) -> Result<(Tensor, Vec<usize>)> {
    let n: usize = parts.iter().map(|p| p.1.len()).sum();
    let mut data = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (t, l) in parts {
        data.extend_from_slice(t.data());
        labels.extend(l);
    }
    Ok((Tensor::from_vec(Shape::new(n, 3, 32, 32), data)?, labels))
}

/// Loads the train batches present in `dir` plus `test_batch.bin`, normalized
/// per channel with statistics of the train split.
pub fn load_cifar10(dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let mut parts = Vec::new();
    for name in TRAIN_FILES {
        let p = dir.join(name);
        if p.exists() {
            parts.push(read_file(&p)?);
        }
    }
    if parts.is_empty() {
        return Err(Error::data(format!("no data_batch_*.bin files in {}", dir.display())));
    }
    let (mut train_x, train_y) = concat(parts)?;
    let (mut test_x, test_y) = read_file(&dir.join(TEST_FILE))?;
    let (mean, std) = channel_stats(&train_x);
    normalize_channels(&mut train_x, &mean, &std);
    normalize_channels(&mut test_x, &mean, &std);
    let descriptor = DatasetDescriptor::Cifar10 {
        path: dir.display().to_string(),
    };
    Ok((
        LabeledDataset::new(train_x, Targets::Classes(train_y), Split::Train, descriptor.clone())?,
        LabeledDataset::new(test_x, Targets::Classes(test_y), Split::Test, descriptor)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_records(n: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(n * CIFAR10_RECORD_LEN);
        for i in 0..n {
            out.push((i % 10) as u8);
            out.extend((0..3072).map(|p| ((i * 31 + p * 7) % 256) as u8));
        }
        out
    }

    #[test]
    fn ten_thousand_records() {
        let (x, y) = parse_cifar10_records(&synthetic_records(10_000)).unwrap();
        assert_eq!(x.shape().n, 10_000);
        assert_eq!(y.len(), 10_000);
    }

    #[test]
    fn rejects_ragged_length() {
        let mut b = synthetic_records(3);
        b.push(0);
        assert!(matches!(parse_cifar10_records(&b), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_label_above_nine() {
        let mut b = synthetic_records(2);
        b[CIFAR10_RECORD_LEN] = 10;
        assert!(matches!(parse_cifar10_records(&b), Err(Error::Data(_))));
    }

    #[test]
    fn write_then_read_directory() {
        let dir = tempfile::tempdir().unwrap();
        let train = synthetic_records(20);
        let test = synthetic_records(7);
        fs::write(dir.path().join("data_batch_1.bin"), &train).unwrap();
        fs::write(dir.path().join("test_batch.bin"), &test).unwrap();
        let (tr, te) = load_cifar10(dir.path()).unwrap();
        assert_eq!(tr.len(), 20);
        assert_eq!(te.len(), 7);
        let Targets::Classes(labels) = &te.targets else { panic!() };
        assert_eq!(labels, &(0..7).map(|i| i % 10).collect::<Vec<_>>());

        // pixels are recoverable from the normalized tensor
        let (raw, _) = parse_cifar10_records(&train).unwrap();
        let (mean, std) = channel_stats(&raw);
        for (i, (&a, &b)) in tr.images.data().iter().zip(raw.data()).enumerate().step_by(97) {
            let k = (i / 1024) % 3;
            let back = a as f64 * std[k] + mean[k];
            assert!((back - b as f64).abs() < 1e-5);
            assert_eq!(((back * 255.0).round() as u8), train[1 + i / 3072 * CIFAR10_RECORD_LEN + i % 3072]);
        }
    }
}
