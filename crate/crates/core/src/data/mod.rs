//! Datasets, samplers, and batching.

mod cifar;
mod sampling;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use cifar::{load_cifar10, read_cifar_batch, CifarOptions, CIFAR_RECORD_BYTES};
pub use sampling::{bag_sample, expected_unique_fraction, unique_fraction, unique_subset, SamplingMode, SamplingPlan};

/// Labelled examples stored as one `[n, ..]` feature tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Dataset("dataset is empty".into()));
        }
        if features.batch() != labels.len() {
            return Err(Error::Dataset(format!("{} feature rows but {} labels", features.batch(), labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self { name: name.into(), features, labels, classes })
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

    /// Shape of a single example.
    pub fn example_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    /// Features and labels of the given examples, in order, duplicates kept.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.features.select_rows(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (x, y) = self.gather(indices)?;
        Self::new(self.name.clone(), x, y, self.classes)
    }

    /// Indices of the examples whose label is in `labels`.
    pub fn indices_with_labels(&self, labels: &[usize]) -> Vec<usize> {
        (0..self.len()).filter(|&i| labels.contains(&self.labels[i])).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        self.labels.iter().for_each(|&y| counts[y] += 1);
        counts
    }

    /// Writes `label,feat0,...,featD` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_err)?;
        for i in 0..self.len() {
            let mut row = vec![self.labels[i].to_string()];
            row.extend(self.features.row(i).iter().map(|v| format!("{v:?}")));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads rows written by [`write_csv`](Self::write_csv). The class count
    /// is one past the largest label unless given.
    pub fn read_csv(path: &Path, classes: Option<usize>) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path).map_err(csv_err)?;
        let mut labels = Vec::new();
        let mut data = Vec::new();
        let mut dim = None;
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let bad = |what: &str| Error::Dataset(format!("{}: row {}: {what}", path.display(), line + 1));
            let mut fields = rec.iter();
            let label = fields.next().and_then(|s| s.trim().parse::<usize>().ok()).ok_or_else(|| bad("bad label"))?;
            let feats = fields.map(|s| s.trim().parse::<f64>()).collect::<std::result::Result<Vec<_>, _>>();
            let feats = feats.map_err(|_| bad("bad feature"))?;
            if *dim.get_or_insert(feats.len()) != feats.len() || feats.is_empty() {
                return Err(bad("inconsistent feature count"));
            }
            labels.push(label);
            data.extend(feats);
        }
        let d = dim.ok_or_else(|| Error::Dataset(format!("{} is empty", path.display())))?;
        let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
        let name = path.file_stem().map_or("csv".into(), |s| s.to_string_lossy().into_owned());
        Self::new(name, Tensor::new(vec![labels.len(), d], data)?, labels, classes)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Dataset(e.to_string())
}

/// Gaussian blobs, one per class, centred on the unit circle (dimension 2)
/// or on seeded random unit directions (higher dimensions), with isotropic
/// noise of standard deviation `spread`. Examples are ordered by class.
pub fn synth_clusters(classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || per_class == 0 || dim == 0 {
        return Err(Error::InvalidArgument("need at least 2 classes, 1 example per class and 1 dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            if dim == 2 {
                let a = std::f64::consts::TAU * c as f64 / classes as f64;
                vec![a.cos(), a.sin()]
            } else if dim == 1 {
                vec![c as f64]
            } else {
                let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            }
        })
        .collect();
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(center.iter().map(|&m| m + spread * rng.sample::<f64, _>(StandardNormal)));
            labels.push(c);
        }
    }
    let x = Tensor::new(vec![labels.len(), dim], data)?;
    Dataset::new(format!("synth-{classes}c-{dim}d"), x, labels, classes)
}

/// Train and test sets drawn from the same clusters: the first
/// `train_per_class` examples of each class go to training.
pub fn synth_split(
    classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let per = train_per_class + test_per_class;
    let all = synth_clusters(classes, per, dim, spread, seed)?;
    let (train, test): (Vec<usize>, Vec<usize>) = (0..all.len()).partition(|i| i % per < train_per_class);
    let mut tr = all.subset(&train)?;
    let mut te = all.subset(&test)?;
    tr.name = format!("{}-train", all.name);
    te.name = format!("{}-test", all.name);
    Ok((tr, te))
}

/// One pass over `indices` in a seeded order, `batch_size` at a time; the
/// final partial batch is kept.
pub fn batches(indices: &[usize], batch_size: usize, seed: u64) -> Result<impl Iterator<Item = Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut order = indices.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter())
}

/// Endless batches over `indices`: every epoch is a fresh seeded shuffle.
#[derive(Debug, Clone)]
pub struct BatchStream {
    indices: Vec<usize>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    current: Vec<Vec<usize>>,
    drawn: u64,
}

impl BatchStream {
    pub fn new(indices: Vec<usize>, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if indices.is_empty() {
            return Err(Error::Dataset("no examples to batch".into()));
        }
        Ok(Self { indices, batch_size, seed, epoch: 0, current: Vec::new(), drawn: 0 })
    }

    /// Batches handed out so far.
    pub fn drawn(&self) -> u64 {
        self.drawn
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.current.is_empty() {
            let seed = self.seed ^ self.epoch.wrapping_mul(0xD6E8_FEB8_6659_FD93);
            self.current = batches(&self.indices, self.batch_size, seed).expect("validated").collect();
            self.current.reverse();
            self.epoch += 1;
        }
        self.drawn += 1;
        self.current.pop().expect("non-empty epoch")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_sizes_keep_the_remainder() {
        let sizes: Vec<usize> = batches(&(0..10).collect::<Vec<_>>(), 3, 1).unwrap().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        assert!(batches(&[1], 0, 0).is_err());
    }

    #[test]
    fn batch_order_is_seeded() {
        let idx: Vec<usize> = (0..20).collect();
        let a: Vec<_> = batches(&idx, 4, 9).unwrap().collect();
        let b: Vec<_> = batches(&idx, 4, 9).unwrap().collect();
        let c: Vec<_> = batches(&idx, 4, 10).unwrap().collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut all: Vec<usize> = a.concat();
        all.sort();
        assert_eq!(all, idx);
    }

    #[test]
    fn bagged_duplicates_survive_batching() {
        let plan = [0, 0, 0, 2];
        let mut all: Vec<usize> = batches(&plan, 3, 0).unwrap().flatten().collect();
        all.sort();
        assert_eq!(all, plan);
    }

    #[test]
    fn stream_reshuffles_each_epoch() {
        let mut s = BatchStream::new((0..6).collect(), 4, 3).unwrap();
        let e1 = [s.next_batch(), s.next_batch()];
        let e2 = [s.next_batch(), s.next_batch()];
        assert_eq!(e1[1].len(), 2);
        assert_ne!(e1, e2);
        assert_eq!(s.drawn(), 4);
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let a = synth_clusters(8, 50, 2, 0.15, 4).unwrap();
        let b = synth_clusters(8, 50, 2, 0.15, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![50; 8]);
        let hi = synth_clusters(3, 5, 6, 0.1, 4).unwrap();
        assert_eq!(hi.example_shape(), &[6]);
        let (tr, te) = synth_split(3, 4, 1, 6, 0.1, 4).unwrap();
        assert_eq!((tr.len(), te.len()), (12, 3));
        assert_eq!(te.features().row(0), hi.features().row(4));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let d = synth_clusters(3, 4, 2, 0.3, 1).unwrap();
        d.write_csv(&path).unwrap();
        let back = Dataset::read_csv(&path, Some(3)).unwrap();
        assert_eq!(back.labels(), d.labels());
        assert!(back.features().bitwise_eq(d.features()));
    }
}
