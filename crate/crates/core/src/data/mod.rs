//! MNIST ingestion, IID and label-pair partitioning, seeded batch streams and
//! synthetic benchmark inputs.

mod idx;

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelKind, ModelSpec};
use crate::rng;
use crate::tensor::Tensor;

pub use idx::{encode_idx, parse_idx, read_idx, IdxArray, IMAGES_MAGIC, LABELS_MAGIC};

pub const MNIST_CLASSES: usize = 10;

/// Images scaled to `[0, 1]` with one label per image.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u8>) -> Result<Self> {
        if images.dim(0) != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.dim(0),
                labels.len()
            )));
        }
        if let Some(bad) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::validation(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Count of samples per label value `0..=max label`.
    pub fn label_histogram(&self) -> Vec<usize> {
        let top = self
            .labels
            .iter()
            .copied()
            .max()
            .map_or(0, |m| usize::from(m) + 1);
        let mut hist = vec![0; top];
        for &l in &self.labels {
            hist[usize::from(l)] += 1;
        }
        hist
    }

    /// The first `n` samples (all of them when `n >= len`).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        if n >= self.len() {
            return Ok(self.clone());
        }
        Ok(Dataset {
            images: self.images.slice_rows(0, n)?,
            labels: self.labels[..n].to_vec(),
        })
    }
}

/// Loads an MNIST image/label IDX pair, dividing pixels by 255.
pub fn load_mnist(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = read_idx(images_path.as_ref(), IMAGES_MAGIC)?;
    let labels = read_idx(labels_path.as_ref(), LABELS_MAGIC)?;
    let (n, rows, cols) = (images.dims[0], images.dims[1], images.dims[2]);
    if labels.dims[0] != n {
        return Err(Error::Consistency(format!(
            "{} has {n} images but {} has {} labels",
            images_path.as_ref().display(),
            labels_path.as_ref().display(),
            labels.dims[0]
        )));
    }
    if let Some(&bad) = labels
        .payload
        .iter()
        .find(|&&l| usize::from(l) >= MNIST_CLASSES)
    {
        return Err(Error::Consistency(format!(
            "label {bad} outside 0..{MNIST_CLASSES}"
        )));
    }
    let pixels = images
        .payload
        .iter()
        .map(|&p| f32::from(p) / 255.0)
        .collect();
    Dataset::new(Tensor::new(vec![n, 1, rows, cols], pixels)?, labels.payload)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "kebab-case")]
pub enum PartitionScheme {
    Iid,
    LabelPairs { pairs: Vec<(u8, u8)> },
}

impl PartitionScheme {
    pub fn name(&self) -> &'static str {
        match self {
            PartitionScheme::Iid => "iid",
            PartitionScheme::LabelPairs { .. } => "label-pairs",
        }
    }

    /// `[(0,1), (2,3), ...]` over `classes` labels.
    pub fn consecutive_pairs(classes: u8) -> Self {
        PartitionScheme::LabelPairs {
            pairs: (0..classes / 2).map(|i| (2 * i, 2 * i + 1)).collect(),
        }
    }

    pub fn split(&self, dataset: &Arc<Dataset>, k: usize, seed: u64) -> Result<Vec<Shard>> {
        match self {
            PartitionScheme::Iid => partition_iid(dataset, k, seed),
            PartitionScheme::LabelPairs { pairs } => {
                if pairs.len() != k {
                    return Err(Error::validation(format!(
                        "{} label pairs for {k} workers",
                        pairs.len()
                    )));
                }
                partition_label_pairs(dataset, pairs, seed)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShardScheme {
    Iid,
    LabelPair(u8, u8),
}

/// Read-only view of the samples assigned to one worker.
#[derive(Debug, Clone)]
pub struct Shard {
    dataset: Arc<Dataset>,
    indices: Vec<usize>,
    worker_id: u32,
    scheme: ShardScheme,
}

impl Shard {
    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.dataset
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn worker_id(&self) -> u32 {
        self.worker_id
    }

    pub fn scheme(&self) -> ShardScheme {
        self.scheme
    }

    pub fn labels(&self) -> impl Iterator<Item = u8> + '_ {
        self.indices.iter().map(|&i| self.dataset.labels[i])
    }
}

/// Seeded global shuffle cut into `k` contiguous slices; the first `N mod k`
/// shards get one extra sample.
pub fn partition_iid(dataset: &Arc<Dataset>, k: usize, seed: u64) -> Result<Vec<Shard>> {
    let n = dataset.len();
    if k == 0 || k > n {
        return Err(Error::validation(format!(
            "cannot split {n} samples into {k} shards"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "partition-iid", 0));
    let (base, extra) = (n / k, n % k);
    let mut shards = Vec::with_capacity(k);
    let mut start = 0;
    for w in 0..k {
        let len = base + usize::from(w < extra);
        shards.push(Shard {
            dataset: Arc::clone(dataset),
            indices: order[start..start + len].to_vec(),
            worker_id: w as u32,
            scheme: ShardScheme::Iid,
        });
        start += len;
    }
    Ok(shards)
}

/// Shard `i` holds exactly the samples labelled `pairs[i].0` or `pairs[i].1`,
/// in seeded random order.
pub fn partition_label_pairs(
    dataset: &Arc<Dataset>,
    pairs: &[(u8, u8)],
    seed: u64,
) -> Result<Vec<Shard>> {
    if pairs.is_empty() {
        return Err(Error::validation("no label pairs given"));
    }
    let mut owner = [None::<usize>; 256];
    for (i, &(a, b)) in pairs.iter().enumerate() {
        if a == b {
            return Err(Error::validation(format!("pair {i} repeats label {a}")));
        }
        for label in [a, b] {
            if let Some(prev) = owner[usize::from(label)] {
                return Err(Error::validation(format!(
                    "label {label} appears in pairs {prev} and {i}"
                )));
            }
            owner[usize::from(label)] = Some(i);
        }
    }
    let mut members = vec![Vec::new(); pairs.len()];
    for (idx, &label) in dataset.labels.iter().enumerate() {
        match owner[usize::from(label)] {
            Some(shard) => members[shard].push(idx),
            None => {
                return Err(Error::validation(format!(
                    "label {label} is not covered by any pair"
                )))
            }
        }
    }
    Ok(members
        .into_iter()
        .zip(pairs)
        .enumerate()
        .map(|(w, (mut indices, &(a, b)))| {
            indices.shuffle(&mut rng::stream(seed, "partition-pairs", w as u64));
            Shard {
                dataset: Arc::clone(dataset),
                indices,
                worker_id: w as u32,
                scheme: ShardScheme::LabelPair(a, b),
            }
        })
        .collect())
}

/// Checks that shards are pairwise disjoint and cover `0..n`.
pub fn is_exact_partition(shards: &[Shard], n: usize) -> bool {
    let mut seen = HashSet::with_capacity(n);
    shards
        .iter()
        .flat_map(|s| s.indices.iter())
        .all(|&i| i < n && seen.insert(i))
        && seen.len() == n
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

/// Endless stream of full batches from one shard. Each epoch is a fresh
/// seeded permutation; a batch never straddles two epochs.
#[derive(Debug, Clone)]
pub struct BatchStream {
    shard: Shard,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchStream {
    pub fn new(shard: &Shard, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 {
            return Err(Error::validation("batch size must be positive"));
        }
        if batch > shard.len() {
            return Err(Error::validation(format!(
                "batch size {batch} exceeds shard size {} (worker {})",
                shard.len(),
                shard.worker_id
            )));
        }
        let mut stream = BatchStream {
            shard: shard.clone(),
            batch,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        stream.reshuffle();
        Ok(stream)
    }

    fn reshuffle(&mut self) {
        self.order.clone_from(&self.shard.indices);
        self.order
            .shuffle(&mut rng::stream(self.seed, "epoch", self.epoch));
        self.pos = 0;
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// `(epoch, offset within epoch)` of the next batch.
    pub fn position(&self) -> (u64, usize) {
        (self.epoch, self.pos)
    }

    /// Dataset indices of the next batch.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let picked = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        picked
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        let picked = self.next_indices();
        let dataset = &self.shard.dataset;
        Ok(Batch {
            inputs: dataset.images.gather_rows(&picked)?,
            labels: picked
                .iter()
                .map(|&i| usize::from(dataset.labels[i]))
                .collect(),
        })
    }
}

/// Exactly `count` full batches of size `b` from a fresh stream.
pub fn batches(shard: &Shard, b: usize, seed: u64, count: usize) -> Result<Vec<Batch>> {
    let mut stream = BatchStream::new(shard, b, seed)?;
    (0..count).map(|_| stream.next_batch()).collect()
}

/// Uniform `[0, 1)` tensor of `b` samples shaped for `kind`'s standard input.
pub fn synthetic_batch(kind: ModelKind, b: usize, seed: u64) -> Result<Tensor> {
    if b == 0 {
        return Err(Error::validation("batch size must be positive"));
    }
    let mut shape = vec![b];
    shape.extend(ModelSpec::standard(kind).input_shape());
    let mut rng = rng::stream(seed, "synthetic", 0);
    Ok(Tensor::from_fn(shape, |_| rng.random::<f32>()))
}
