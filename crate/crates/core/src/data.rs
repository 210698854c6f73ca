//! Datasets, IDX loading, client partitioning and mini-batch sampling.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IdxError, Result};
use crate::model::Batch;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Row-major `n × dim` feature matrix with class labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("dataset must hold at least one sample"));
        }
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::invalid(format!(
                "{} feature values do not form {} rows of dim {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("dataset features must be finite"));
        }
        Ok(Dataset {
            features,
            labels,
            dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut hist = vec![0; self.classes];
        for &i in indices {
            hist[self.labels[i]] += 1;
        }
        hist
    }

    /// Copies the given rows, in order, into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("row {i} out of range")));
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(features, labels, self.dim, self.classes)
    }

    /// Moves the first `per_class` samples of every class into a held-out set.
    /// Returns `(train, test)`.
    pub fn split_per_class(&self, per_class: usize) -> Result<(Dataset, Dataset)> {
        let mut taken = vec![0usize; self.classes];
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, &label) in self.labels.iter().enumerate() {
            if taken[label] < per_class {
                taken[label] += 1;
                test.push(i);
            } else {
                train.push(i);
            }
        }
        Ok((self.subset(&train)?, self.subset(&test)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
}

/// Gaussian blobs around unit-norm random centers, `per_class` samples each,
/// laid out class by class.
pub fn generate_synthetic(spec: SyntheticSpec, seed: u64) -> Result<Dataset> {
    let SyntheticSpec {
        classes,
        dim,
        per_class,
        spread,
    } = spec;
    if classes < 2 || dim < 2 {
        return Err(Error::invalid("synthetic data needs at least 2 classes and 2 dims"));
    }
    if per_class == 0 {
        return Err(Error::invalid("per_class must be positive"));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::invalid("spread must be a finite non-negative number"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut c: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        c.iter_mut().for_each(|v| *v /= norm);
        centers.push(c);
    }

    let n = classes * per_class;
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &c in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(c + spread * z);
            }
            labels.push(label);
        }
    }
    Dataset::new(features, labels, dim, classes)
}

fn read_u32(bytes: &[u8], offset: usize, file: &'static str) -> std::result::Result<u32, IdxError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            file,
            needed: offset + 4,
            available: bytes.len(),
        })
}

/// Parses an in-memory IDX image/label pair (big-endian, MNIST layout).
/// Pixels are scaled to `[0, 1]`; images are flattened row-major.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    const IMG: &str = "images";
    const LBL: &str = "labels";

    let magic = read_u32(images, 0, IMG)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(IdxError::BadMagic {
            file: IMG,
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        }
        .into());
    }
    let n_images = read_u32(images, 4, IMG)? as usize;
    let rows = read_u32(images, 8, IMG)? as usize;
    let cols = read_u32(images, 12, IMG)? as usize;

    let magic = read_u32(labels, 0, LBL)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(IdxError::BadMagic {
            file: LBL,
            expected: IDX_LABELS_MAGIC,
            found: magic,
        }
        .into());
    }
    let n_labels = read_u32(labels, 4, LBL)? as usize;
    if n_images != n_labels {
        return Err(IdxError::LengthMismatch {
            images: n_images,
            labels: n_labels,
        }
        .into());
    }

    let dim = rows * cols;
    let pixels = images.get(16..16 + n_images * dim).ok_or(IdxError::Truncated {
        file: IMG,
        needed: 16 + n_images * dim,
        available: images.len(),
    })?;
    let raw_labels = labels.get(8..8 + n_labels).ok_or(IdxError::Truncated {
        file: LBL,
        needed: 8 + n_labels,
        available: labels.len(),
    })?;

    const CLASSES: usize = 10;
    let mut label_vec = Vec::with_capacity(n_labels);
    for (index, &label) in raw_labels.iter().enumerate() {
        if label as usize >= CLASSES {
            return Err(IdxError::LabelOutOfRange {
                index,
                label,
                classes: CLASSES,
            }
            .into());
        }
        label_vec.push(label as usize);
    }
    let features = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Dataset::new(features, label_vec, dim, CLASSES)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let read = |path: &Path| {
        std::fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    };
    parse_idx(&read(images_path)?, &read(labels_path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionScheme {
    Iid,
    LabelShard { shards_per_client: usize },
    Dirichlet { alpha: f64 },
}

impl Default for PartitionScheme {
    fn default() -> Self {
        PartitionScheme::LabelShard {
            shards_per_client: 2,
        }
    }
}

/// One sorted index list per client; together they cover the dataset exactly once.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub assignments: Vec<Vec<usize>>,
    pub scheme: PartitionScheme,
}

impl PartitionPlan {
    pub fn client_count(&self) -> usize {
        self.assignments.len()
    }

    pub fn client(&self, i: usize) -> &[usize] {
        &self.assignments[i]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }
}

/// Contiguous `parts`-way split with boundaries `⌊i·n/parts⌋`.
fn even_chunks(items: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let n = items.len();
    (0..parts)
        .map(|i| items[i * n / parts..(i + 1) * n / parts].to_vec())
        .collect()
}

pub fn partition(
    dataset: &Dataset,
    clients: usize,
    scheme: PartitionScheme,
    seed: u64,
) -> Result<PartitionPlan> {
    let n = dataset.len();
    if clients == 0 {
        return Err(Error::invalid("client count must be positive"));
    }
    if n < clients {
        return Err(Error::invalid(format!(
            "{n} samples cannot cover {clients} clients"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut assignments = match scheme {
        PartitionScheme::Iid => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            even_chunks(&order, clients)
        }
        PartitionScheme::LabelShard { shards_per_client } => {
            if shards_per_client == 0 {
                return Err(Error::invalid("shards_per_client must be positive"));
            }
            let shard_count = clients * shards_per_client;
            if shard_count > n {
                return Err(Error::invalid(format!(
                    "{shard_count} shards requested from {n} samples"
                )));
            }
            let mut by_label: Vec<usize> = (0..n).collect();
            by_label.sort_by_key(|&i| dataset.labels()[i]);
            let shards = even_chunks(&by_label, shard_count);
            let mut shard_ids: Vec<usize> = (0..shard_count).collect();
            shard_ids.shuffle(&mut rng);
            shard_ids
                .chunks(shards_per_client)
                .map(|ids| ids.iter().flat_map(|&s| shards[s].iter().copied()).collect())
                .collect()
        }
        PartitionScheme::Dirichlet { alpha } => {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(Error::invalid("dirichlet alpha must be positive and finite"));
            }
            dirichlet_assign(dataset, clients, alpha, &mut rng)?
        }
    };

    for list in &mut assignments {
        list.sort_unstable();
    }
    Ok(PartitionPlan {
        assignments,
        scheme,
    })
}

fn dirichlet_assign(
    dataset: &Dataset,
    clients: usize,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let mut assignments = vec![Vec::new(); clients];
    for class in 0..dataset.class_count() {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.labels()[i] == class)
            .collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(rng);
        let mut props: Vec<f64> = (0..clients).map(|_| gamma.sample(rng)).collect();
        let total: f64 = props.iter().sum();
        if total > 0.0 {
            props.iter_mut().for_each(|p| *p /= total);
        } else {
            props.iter_mut().for_each(|p| *p = 1.0 / clients as f64);
        }
        let m = members.len();
        let mut cum = 0.0;
        let mut start = 0;
        for (c, p) in props.iter().enumerate() {
            cum += p;
            let end = if c + 1 == clients {
                m
            } else {
                ((cum * m as f64).floor() as usize).clamp(start, m)
            };
            assignments[c].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    // Small alpha can starve a client entirely; hand it one sample from the
    // currently largest client so every list stays non-empty.
    while let Some(empty) = assignments.iter().position(Vec::is_empty) {
        let donor = (0..clients)
            .max_by_key(|&c| (assignments[c].len(), std::cmp::Reverse(c)))
            .unwrap();
        let sample = assignments[donor].pop().unwrap();
        assignments[empty].push(sample);
    }
    Ok(assignments)
}

/// Draws `batch_size` rows uniformly with replacement from `indices`.
pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    indices: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> Result<Batch> {
    if indices.is_empty() {
        return Err(Error::invalid("cannot sample from an empty partition"));
    }
    let mut features = Vec::with_capacity(batch_size * dataset.dim());
    let mut labels = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let i = indices[rng.random_range(0..indices.len())];
        features.extend_from_slice(dataset.row(i));
        labels.push(dataset.labels()[i]);
    }
    Batch::new(features, labels, dataset.dim())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(classes: usize, per_class: usize) -> Dataset {
        generate_synthetic(
            SyntheticSpec {
                classes,
                dim: 4,
                per_class,
                spread: 0.1,
            },
            11,
        )
        .unwrap()
    }

    #[test]
    fn synthetic_is_balanced_and_deterministic() {
        let d = generate_synthetic(
            SyntheticSpec {
                classes: 10,
                dim: 16,
                per_class: 4500,
                spread: 0.3,
            },
            5,
        )
        .unwrap();
        assert_eq!(d.len(), 45_000);
        assert_eq!(d.dim(), 16);
        assert!(d.label_histogram(&(0..d.len()).collect::<Vec<_>>())
            .iter()
            .all(|&c| c == 4500));
        let again = generate_synthetic(
            SyntheticSpec {
                classes: 10,
                dim: 16,
                per_class: 4500,
                spread: 0.3,
            },
            5,
        )
        .unwrap();
        assert_eq!(d, again);
    }

    #[test]
    fn zero_spread_collapses_onto_centers() {
        let d = generate_synthetic(
            SyntheticSpec {
                classes: 3,
                dim: 5,
                per_class: 7,
                spread: 0.0,
            },
            2,
        )
        .unwrap();
        for i in 0..d.len() {
            let first = d.labels()[i] * 7;
            assert_eq!(d.row(i), d.row(first));
            let norm: f64 = d.row(i).iter().map(|v| v * v).sum();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn synthetic_rejects_degenerate_shapes() {
        let spec = SyntheticSpec {
            classes: 1,
            dim: 4,
            per_class: 3,
            spread: 0.1,
        };
        assert!(generate_synthetic(spec, 0).is_err());
        assert!(generate_synthetic(SyntheticSpec { classes: 2, dim: 1, ..spec }, 0).is_err());
    }

    #[test]
    fn split_per_class_takes_exact_counts() {
        let d = blobs(3, 10);
        let (train, test) = d.split_per_class(4).unwrap();
        assert_eq!(test.len(), 12);
        assert_eq!(train.len(), 18);
        assert_eq!(test.label_histogram(&(0..12).collect::<Vec<_>>()), vec![4, 4, 4]);
    }

    #[test]
    fn iid_split_is_exact() {
        let d = blobs(10, 4500);
        let plan = partition(&d, 30, PartitionScheme::Iid, 3).unwrap();
        assert!(plan.sizes().iter().all(|&s| s == 1500));
    }

    #[test]
    fn label_shard_limits_distinct_labels() {
        let d = blobs(10, 4500);
        let plan = partition(
            &d,
            30,
            PartitionScheme::LabelShard {
                shards_per_client: 2,
            },
            9,
        )
        .unwrap();
        for list in &plan.assignments {
            assert_eq!(list.len(), 1500);
            let distinct = d.label_histogram(list).iter().filter(|&&c| c > 0).count();
            assert!(distinct <= 2);
        }
    }

    #[test]
    fn too_few_samples_is_rejected() {
        let d = blobs(2, 2);
        assert!(partition(&d, 5, PartitionScheme::Iid, 0).is_err());
    }

    #[test]
    fn dirichlet_small_alpha_keeps_every_client_nonempty() {
        let d = blobs(3, 20);
        let plan = partition(&d, 25, PartitionScheme::Dirichlet { alpha: 0.01 }, 4).unwrap();
        assert!(plan.assignments.iter().all(|l| !l.is_empty()));
        let mut all: Vec<usize> = plan.assignments.concat();
        all.sort_unstable();
        assert_eq!(all, (0..60).collect::<Vec<_>>());
    }

    #[test]
    fn sample_batch_from_singleton_repeats() {
        let d = blobs(2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_batch(&d, &[3], 6, &mut rng).unwrap();
        assert_eq!(b.len(), 6);
        for i in 0..6 {
            assert_eq!(b.row(i), d.row(3));
        }
    }

    #[test]
    fn sample_batch_is_deterministic() {
        let d = blobs(2, 50);
        let idx: Vec<usize> = (10..60).collect();
        let b1 = sample_batch(&d, &idx, 8, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b2 = sample_batch(&d, &idx, 8, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn empty_partition_cannot_be_sampled() {
        let d = blobs(2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_batch(&d, &[], 4, &mut rng).is_err());
    }
}
