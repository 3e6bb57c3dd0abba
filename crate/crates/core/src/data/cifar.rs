//! CIFAR-10 binary batches: records of one label byte followed by 3072
//! pixel bytes (1024 red, 1024 green, 1024 blue, row-major 32×32).

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
const TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
const TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CifarOptions {
    /// Divide pixel values by 255.
    pub scale: bool,
    /// Subtract the per-pixel training mean from both splits.
    pub mean_subtract: bool,
}

/// Parses one batch file. Pixels are kept as raw byte values.
pub fn read_cifar_batch(path: &Path) -> Result<(Vec<f64>, Vec<usize>)> {
    let bytes = fs::read(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::Dataset(format!(
            "{}: {} bytes is not a whole number of {CIFAR_RECORD_BYTES}-byte records",
            path.display(),
            bytes.len()
        )));
    }
    let mut pixels = Vec::with_capacity(bytes.len());
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD_BYTES);
    for rec in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        if rec[0] > 9 {
            return Err(Error::Dataset(format!("{}: label byte {} out of range", path.display(), rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| f64::from(b)));
    }
    Ok((pixels, labels))
}

fn load_split(dir: &Path, files: &[&str]) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let (p, l) = read_cifar_batch(&dir.join(f))?;
        pixels.extend(p);
        labels.extend(l);
    }
    Ok((pixels, labels))
}

/// Loads the five training batches and the test batch from `dir`.
pub fn load_cifar10(dir: &Path, options: CifarOptions) -> Result<(Dataset, Dataset)> {
    let (mut train_x, train_y) = load_split(dir, &TRAIN_FILES)?;
    let (mut test_x, test_y) = load_split(dir, &[TEST_FILE])?;
    let row = CIFAR_RECORD_BYTES - 1;
    if options.scale {
        train_x.iter_mut().chain(test_x.iter_mut()).for_each(|v| *v /= 255.0);
    }
    if options.mean_subtract {
        let n = train_y.len() as f64;
        let mut mean = vec![0.0; row];
        for r in train_x.chunks_exact(row) {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for r in train_x.chunks_exact_mut(row).chain(test_x.chunks_exact_mut(row)) {
            r.iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
        }
    }
    let make = |name: &str, x: Vec<f64>, y: Vec<usize>| {
        Dataset::new(name, Tensor::new(vec![y.len(), 3, 32, 32], x)?, y, 10)
    };
    Ok((make("cifar10-train", train_x, train_y)?, make("cifar10-test", test_x, test_y)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_batch(records: usize, seed: u8) -> Vec<u8> {
        let mut out = Vec::new();
        for r in 0..records {
            out.push((r % 10) as u8);
            out.extend((0..CIFAR_RECORD_BYTES - 1).map(|i| (i as u8).wrapping_mul(seed).wrapping_add(r as u8)));
        }
        out
    }

    #[test]
    fn first_record_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bin");
        let raw = fake_batch(3, 7);
        fs::write(&path, &raw).unwrap();
        let (px, labels) = read_cifar_batch(&path).unwrap();
        assert_eq!(labels, vec![0, 1, 2]);
        let back: Vec<u8> = px[..CIFAR_RECORD_BYTES - 1].iter().map(|&v| v as u8).collect();
        assert_eq!(back, raw[1..CIFAR_RECORD_BYTES]);
    }

    #[test]
    fn truncated_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bin");
        fs::write(&path, &fake_batch(2, 1)[..CIFAR_RECORD_BYTES + 5]).unwrap();
        assert!(matches!(read_cifar_batch(&path), Err(Error::Dataset(_))));
        assert!(read_cifar_batch(&dir.path().join("missing.bin")).is_err());
    }

    #[test]
    fn full_layout_loads_with_normalization() {
        let dir = tempfile::tempdir().unwrap();
        for f in TRAIN_FILES {
            fs::write(dir.path().join(f), fake_batch(10, 3)).unwrap();
        }
        fs::write(dir.path().join(TEST_FILE), fake_batch(10, 5)).unwrap();
        let (train, test) = load_cifar10(dir.path(), CifarOptions::default()).unwrap();
        assert_eq!(train.len(), 50);
        assert_eq!(test.len(), 10);
        assert_eq!(train.class_counts(), vec![5; 10]);
        assert_eq!(train.example_shape(), &[3, 32, 32]);
        let opts = CifarOptions { scale: true, mean_subtract: true };
        let (train, _) = load_cifar10(dir.path(), opts).unwrap();
        let col0: f64 = (0..train.len()).map(|i| train.features().row(i)[0]).sum();
        assert!(col0.abs() < 1e-9);
    }
}
