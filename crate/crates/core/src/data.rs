//! Datasets, synthetic generation and Dirichlet non-IID partitioning.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{FedError, Result};
use crate::nn::Tensor2;
use crate::seed::{stream_rng, Stream};

const DATASET_MAGIC: &[u8; 6] = b"FEDDS1";

/// Labelled feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor2,
    labels: Vec<usize>,
    num_classes: usize,
    name: String,
}

impl Dataset {
    pub fn new(
        features: Tensor2,
        labels: Vec<usize>,
        num_classes: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(FedError::Parameter(
                "dataset must hold at least one sample".into(),
            ));
        }
        if features.rows() != labels.len() {
            return Err(FedError::Shape(format!(
                "{} feature rows, {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if num_classes == 0 || num_classes > u16::MAX as usize + 1 {
            return Err(FedError::Parameter(format!(
                "unsupported class count {num_classes}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(FedError::Parameter(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Tensor2 {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Features and labels of the given samples, in the given order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor2, Vec<usize>) {
        (
            self.features.gather_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(FedError::Parameter(format!(
                "index {bad} out of range for {} samples",
                self.len()
            )));
        }
        let (features, labels) = self.batch(indices);
        Dataset::new(features, labels, self.num_classes, self.name.clone())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        class_counts(self.labels.iter().copied(), self.num_classes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(DATASET_MAGIC);
        w.u64(self.len() as u64);
        w.u64(self.feature_dim() as u64);
        w.u64(self.num_classes as u64);
        w.u64(self.name.len() as u64);
        w.bytes(self.name.as_bytes());
        w.f64s(self.features.values());
        for &y in &self.labels {
            w.u16(y as u16);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(DATASET_MAGIC, "magic")?;
        let n = r.count("sample_count", 1 << 40)?;
        if n == 0 {
            return Err(r.error("sample_count", "dataset is empty"));
        }
        let d = r.count("feature_dim", 1 << 24)?;
        let num_classes = r.count("num_classes", u16::MAX as u64 + 1)?;
        if num_classes == 0 {
            return Err(r.error("num_classes", "zero classes"));
        }
        let name_len = r.count("name_length", 1 << 16)?;
        let name_offset = r.offset();
        let name = std::str::from_utf8(r.bytes(name_len, "name")?)
            .map_err(|_| FedError::Format {
                offset: name_offset,
                field: "name",
                message: "name is not UTF-8".into(),
            })?
            .to_owned();
        let total = n
            .checked_mul(d)
            .ok_or_else(|| r.error("feature_dim", "size overflow"))?;
        let values = r.f64s(total, "features")?;
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let offset = r.offset();
            let y = r.u16("labels")? as usize;
            if y >= num_classes {
                return Err(FedError::Format {
                    offset,
                    field: "labels",
                    message: format!("label {y} out of range for {num_classes} classes"),
                });
            }
            labels.push(y);
        }
        r.finish()?;
        let features = Tensor2::new(n, d, values)?;
        Dataset::new(features, labels, num_classes, name)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Reads a CSV with header `f0,...,fD,label`. The class count is one more
    /// than the largest label seen.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| FedError::Parameter(format!("{}: {e}", path.display())))?;
        let header = reader
            .headers()
            .map_err(|e| FedError::Parameter(format!("{}: {e}", path.display())))?
            .clone();
        let d = header.len().saturating_sub(1);
        let header_ok = header.len() >= 2
            && header.get(d) == Some("label")
            && (0..d).all(|i| header.get(i) == Some(format!("f{i}").as_str()));
        if !header_ok {
            return Err(FedError::Parameter(format!(
                "{}: header must be f0,...,fD,label",
                path.display()
            )));
        }
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record =
                record.map_err(|e| FedError::Parameter(format!("{}: {e}", path.display())))?;
            let bad = |what: &str| {
                FedError::Parameter(format!(
                    "{}: row {}: invalid {what}",
                    path.display(),
                    line + 1
                ))
            };
            for i in 0..d {
                let v: f64 = record
                    .get(i)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| bad("feature"))?;
                values.push(v);
            }
            let y: usize = record
                .get(d)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| bad("label"))?;
            labels.push(y);
        }
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        let features = Tensor2::new(labels.len(), d, values)?;
        Dataset::new(features, labels, num_classes, name)
    }
}

pub(crate) fn class_counts(labels: impl Iterator<Item = usize>, num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for y in labels {
        counts[y] += 1;
    }
    counts
}

/// Parameters of a Gaussian-blob classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub feature_dim: usize,
    pub class_separation: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.samples_per_class == 0 || self.feature_dim == 0 {
            return Err(FedError::Parameter(
                "synthetic counts must be at least 1".into(),
            ));
        }
        if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
            return Err(FedError::Parameter(format!(
                "class separation must be nonnegative, got {}",
                self.class_separation
            )));
        }
        Ok(())
    }
}

fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn class_means(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(spec.seed, Stream::Data, &[0]);
    (0..spec.num_classes)
        .map(|_| {
            random_unit(&mut rng, spec.feature_dim)
                .into_iter()
                .map(|x| x * spec.class_separation)
                .collect()
        })
        .collect()
}

fn sample_blobs(
    means: &[Vec<f64>],
    samples_per_class: usize,
    rng: &mut impl Rng,
    name: &str,
) -> Result<Dataset> {
    let dim = means[0].len();
    let mut values = Vec::with_capacity(means.len() * samples_per_class * dim);
    let mut labels = Vec::with_capacity(means.len() * samples_per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..samples_per_class {
            values.extend(
                mean.iter()
                    .map(|m| m + rng.sample::<f64, _>(StandardNormal)),
            );
            labels.push(c);
        }
    }
    let features = Tensor2::new(labels.len(), dim, values)?;
    Dataset::new(features, labels, means.len(), name)
}

/// One isotropic unit-variance Gaussian per class, with class means drawn
/// uniformly on the sphere of radius `class_separation`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let means = class_means(spec);
    let mut rng = stream_rng(spec.seed, Stream::Data, &[1]);
    sample_blobs(&means, spec.samples_per_class, &mut rng, "synthetic")
}

/// A source/target pair sharing one latent cluster geometry.
///
/// Every class is a union of `clusters_per_class` unit-variance Gaussian
/// blobs whose centres lie on the sphere of radius `class_separation`; with
/// more than one blob per class the classes are no longer linearly
/// separable and useful features have to be learned. The source domain
/// draws `source_samples_per_class` samples per class. The target domain
/// reuses the same centres under a random relabelling of the classes, each
/// centre moved by `domain_shift` in a random direction, so features
/// learned on the source transfer while the classifier has to be relearned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainPairSpec {
    pub target: SyntheticSpec,
    pub source_samples_per_class: usize,
    pub clusters_per_class: usize,
    pub domain_shift: f64,
}

fn sample_mixtures(
    centres: &[Vec<Vec<f64>>],
    samples_per_class: usize,
    rng: &mut impl Rng,
    name: &str,
) -> Result<Dataset> {
    let dim = centres[0][0].len();
    let weights = vec![1.0 / centres[0].len() as f64; centres[0].len()];
    let sizes = largest_remainder(&weights, samples_per_class);
    let mut values = Vec::with_capacity(centres.len() * samples_per_class * dim);
    let mut labels = Vec::with_capacity(centres.len() * samples_per_class);
    for (c, blobs) in centres.iter().enumerate() {
        for (mean, &size) in blobs.iter().zip(&sizes) {
            for _ in 0..size {
                values.extend(
                    mean.iter()
                        .map(|m| m + rng.sample::<f64, _>(StandardNormal)),
                );
                labels.push(c);
            }
        }
    }
    let features = Tensor2::new(labels.len(), dim, values)?;
    Dataset::new(features, labels, centres.len(), name)
}

pub fn generate_domain_pair(spec: &DomainPairSpec) -> Result<(Dataset, Dataset)> {
    spec.target.validate()?;
    if spec.source_samples_per_class == 0 || spec.clusters_per_class == 0 {
        return Err(FedError::Parameter(
            "source samples and clusters must be at least 1".into(),
        ));
    }
    if !(spec.domain_shift >= 0.0 && spec.domain_shift.is_finite()) {
        return Err(FedError::Parameter(
            "domain shift must be nonnegative".into(),
        ));
    }
    let t = &spec.target;
    let mut rng = stream_rng(t.seed, Stream::Data, &[0]);
    let centres: Vec<Vec<Vec<f64>>> = (0..t.num_classes)
        .map(|_| {
            (0..spec.clusters_per_class)
                .map(|_| {
                    random_unit(&mut rng, t.feature_dim)
                        .into_iter()
                        .map(|x| x * t.class_separation)
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut rng = stream_rng(t.seed, Stream::Data, &[2]);
    let source = sample_mixtures(&centres, spec.source_samples_per_class, &mut rng, "source")?;

    let mut perm_rng = stream_rng(t.seed, Stream::Data, &[3]);
    let mut order: Vec<usize> = (0..t.num_classes).collect();
    order.shuffle(&mut perm_rng);
    let target_centres: Vec<Vec<Vec<f64>>> = order
        .iter()
        .map(|&c| {
            centres[c]
                .iter()
                .map(|m| {
                    let dir = random_unit(&mut perm_rng, t.feature_dim);
                    m.iter()
                        .zip(dir)
                        .map(|(m, u)| m + spec.domain_shift * u)
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut rng = stream_rng(t.seed, Stream::Data, &[4]);
    let target = sample_mixtures(&target_centres, t.samples_per_class, &mut rng, "target")?;
    Ok((source, target))
}

/// Splits off a held-out fraction of every class. Returns `(train, test)`.
pub fn stratified_split(
    dataset: &Dataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(FedError::Parameter(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut rng = stream_rng(seed, Stream::Split, &[]);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut members in indices_by_class(dataset) {
        members.shuffle(&mut rng);
        let n_test = (test_fraction * members.len() as f64).round() as usize;
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    if train.is_empty() || test.is_empty() {
        return Err(FedError::Parameter("split leaves an empty side".into()));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((dataset.subset(&train)?, dataset.subset(&test)?))
}

fn indices_by_class(dataset: &Dataset) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); dataset.num_classes()];
    for (i, &y) in dataset.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    by_class
}

/// One client's share of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub client_id: usize,
    pub sample_indices: Vec<usize>,
}

impl ClientPartition {
    pub fn len(&self) -> usize {
        self.sample_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_indices.is_empty()
    }

    pub fn class_counts(&self, dataset: &Dataset) -> Vec<usize> {
        class_counts(
            self.sample_indices.iter().map(|&i| dataset.labels()[i]),
            dataset.num_classes(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub alpha: f64,
    pub seed: u64,
}

/// Splits `weights` (summing to 1) of `total` items into integer counts
/// with the largest-remainder method; ties go to the lower index.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Per-class Dirichlet partition: for every class, client shares are drawn
/// from `Dir(alpha * 1_N)` and converted to counts by largest remainder.
/// Empty clients then receive one sample from the largest client.
pub fn dirichlet_partition(
    dataset: &Dataset,
    spec: &PartitionSpec,
) -> Result<Vec<ClientPartition>> {
    let n_clients = spec.num_clients;
    if n_clients == 0 {
        return Err(FedError::Parameter("need at least one client".into()));
    }
    if !(spec.alpha > 0.0 && spec.alpha.is_finite()) {
        return Err(FedError::Parameter(format!(
            "alpha must be positive, got {}",
            spec.alpha
        )));
    }
    if n_clients > dataset.len() {
        return Err(FedError::Parameter(format!(
            "{n_clients} clients cannot all be nonempty with {} samples",
            dataset.len()
        )));
    }
    let gamma = Gamma::new(spec.alpha, 1.0)
        .map_err(|e| FedError::Parameter(format!("alpha {}: {e}", spec.alpha)))?;
    let mut rng = stream_rng(spec.seed, Stream::Partition, &[]);
    let mut shares: Vec<Vec<usize>> = vec![Vec::new(); n_clients];

    for mut members in indices_by_class(dataset) {
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let mut q: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
        let sum: f64 = q.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            q.iter_mut().for_each(|v| *v /= sum);
        } else {
            // every gamma draw underflowed: give the class to one client
            let winner = rng.random_range(0..n_clients);
            q = (0..n_clients)
                .map(|k| if k == winner { 1.0 } else { 0.0 })
                .collect();
        }
        let mut start = 0;
        for (k, count) in largest_remainder(&q, members.len()).into_iter().enumerate() {
            shares[k].extend_from_slice(&members[start..start + count]);
            start += count;
        }
    }

    while let Some(empty) = shares.iter().position(Vec::is_empty) {
        let donor = (0..n_clients)
            .max_by(|&a, &b| shares[a].len().cmp(&shares[b].len()).then(b.cmp(&a)))
            .expect("at least one client");
        let moved = shares[donor]
            .pop()
            .expect("donor holds at least two samples");
        shares[empty].push(moved);
    }

    Ok(shares
        .into_iter()
        .enumerate()
        .map(|(client_id, mut sample_indices)| {
            sample_indices.sort_unstable();
            ClientPartition {
                client_id,
                sample_indices,
            }
        })
        .collect())
}

/// Shannon entropy (nats) of a count histogram.
pub fn count_entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Mean over clients of the entropy of each client's label distribution.
pub fn mean_client_label_entropy(dataset: &Dataset, partitions: &[ClientPartition]) -> f64 {
    partitions
        .iter()
        .map(|p| count_entropy(&p.class_counts(dataset)))
        .sum::<f64>()
        / partitions.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(classes: usize, per_class: usize, dim: usize, sep: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: classes,
            samples_per_class: per_class,
            feature_dim: dim,
            class_separation: sep,
            seed,
        }
    }

    fn assert_disjoint_cover(parts: &[ClientPartition], n: usize) {
        let mut seen = vec![false; n];
        for p in parts {
            for &i in &p.sample_indices {
                assert!(!seen[i], "index {i} assigned twice");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "cover is incomplete");
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(&spec(3, 20, 4, 2.0, 9)).unwrap();
        let b = generate_synthetic(&spec(3, 20, 4, 2.0, 9)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.len(), 60);
        assert_eq!(a.class_counts(), vec![20, 20, 20]);
        let c = generate_synthetic(&spec(3, 20, 4, 2.0, 10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn class_means_sit_on_the_sphere() {
        let s = spec(4, 4000, 3, 5.0, 2);
        let ds = generate_synthetic(&s).unwrap();
        for c in 0..4 {
            let rows: Vec<&[f64]> = (0..ds.len())
                .filter(|&i| ds.labels()[i] == c)
                .map(|i| ds.features().row(i))
                .collect();
            let mean: Vec<f64> = (0..3)
                .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64)
                .collect();
            let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 5.0).abs() < 0.1, "class {c} mean norm {norm}");
        }
    }

    #[test]
    fn synthetic_rejects_bad_spec() {
        assert!(generate_synthetic(&spec(0, 1, 1, 1.0, 0)).is_err());
        assert!(generate_synthetic(&spec(2, 1, 1, -1.0, 0)).is_err());
    }

    #[test]
    fn domain_pair_shares_geometry() {
        let pair = DomainPairSpec {
            target: spec(4, 10, 5, 3.0, 1),
            source_samples_per_class: 15,
            clusters_per_class: 2,
            domain_shift: 0.0,
        };
        let (source, target) = generate_domain_pair(&pair).unwrap();
        assert_eq!(source.len(), 60);
        assert_eq!(target.len(), 40);
        let (s2, t2) = generate_domain_pair(&pair).unwrap();
        assert_eq!(source, s2);
        assert_eq!(target, t2);
    }

    #[test]
    fn single_client_holds_everything() {
        let ds = generate_synthetic(&spec(3, 10, 2, 1.0, 0)).unwrap();
        for alpha in [0.01, 1.0, 100.0] {
            let parts = dirichlet_partition(
                &ds,
                &PartitionSpec {
                    num_clients: 1,
                    alpha,
                    seed: 4,
                },
            )
            .unwrap();
            assert_eq!(parts.len(), 1);
            assert_eq!(parts[0].sample_indices, (0..30).collect::<Vec<_>>());
        }
    }

    #[test]
    fn partition_rejects_impossible_requests() {
        let ds = generate_synthetic(&spec(2, 2, 2, 1.0, 0)).unwrap();
        let too_many = PartitionSpec {
            num_clients: 5,
            alpha: 1.0,
            seed: 0,
        };
        assert!(matches!(
            dirichlet_partition(&ds, &too_many),
            Err(FedError::Parameter(_))
        ));
        let bad_alpha = PartitionSpec {
            num_clients: 2,
            alpha: 0.0,
            seed: 0,
        };
        assert!(dirichlet_partition(&ds, &bad_alpha).is_err());
    }

    #[test]
    fn every_client_nonempty_even_when_tight() {
        let ds = generate_synthetic(&spec(2, 5, 2, 1.0, 0)).unwrap();
        for seed in 0..50 {
            let parts = dirichlet_partition(
                &ds,
                &PartitionSpec {
                    num_clients: 10,
                    alpha: 0.05,
                    seed,
                },
            )
            .unwrap();
            assert!(parts.iter().all(|p| p.len() == 1));
            assert_disjoint_cover(&parts, 10);
        }
    }

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(largest_remainder(&[0.5, 0.5], 3), vec![2, 1]);
        assert_eq!(largest_remainder(&[0.2, 0.3, 0.5], 10), vec![2, 3, 5]);
        assert_eq!(largest_remainder(&[0.34, 0.33, 0.33], 2), vec![1, 1, 0]);
        assert_eq!(largest_remainder(&[1.0], 0), vec![0]);
    }

    #[test]
    fn smaller_alpha_means_more_heterogeneity() {
        let ds = generate_synthetic(&spec(10, 100, 2, 1.0, 0)).unwrap();
        let mean_entropy = |alpha: f64| {
            (0..5)
                .map(|seed| {
                    let parts = dirichlet_partition(
                        &ds,
                        &PartitionSpec {
                            num_clients: 20,
                            alpha,
                            seed,
                        },
                    )
                    .unwrap();
                    mean_client_label_entropy(&ds, &parts)
                })
                .sum::<f64>()
                / 5.0
        };
        let (a, b, c) = (mean_entropy(0.1), mean_entropy(0.5), mean_entropy(10.0));
        assert!(a < b && b < c, "{a} {b} {c}");
    }

    #[test]
    fn large_alpha_approaches_global_distribution() {
        let ds = generate_synthetic(&spec(10, 100, 2, 1.0, 0)).unwrap();
        let global: Vec<f64> = ds
            .class_counts()
            .iter()
            .map(|&c| c as f64 / ds.len() as f64)
            .collect();
        for seed in 0..5 {
            let parts = dirichlet_partition(
                &ds,
                &PartitionSpec {
                    num_clients: 10,
                    alpha: 1000.0,
                    seed,
                },
            )
            .unwrap();
            for p in &parts {
                let counts = p.class_counts(&ds);
                let tv: f64 = counts
                    .iter()
                    .zip(&global)
                    .map(|(&c, g)| (c as f64 / p.len() as f64 - g).abs())
                    .sum::<f64>()
                    / 2.0;
                assert!(tv < 0.1, "seed {seed} client {} tv {tv}", p.client_id);
            }
        }
    }

    #[test]
    fn stratified_split_keeps_class_shares() {
        let ds = generate_synthetic(&spec(4, 50, 3, 1.0, 0)).unwrap();
        let (train, test) = stratified_split(&ds, 0.2, 1).unwrap();
        assert_eq!(test.class_counts(), vec![10; 4]);
        assert_eq!(train.class_counts(), vec![40; 4]);
    }

    #[test]
    fn dataset_round_trip() {
        let ds = generate_synthetic(&spec(3, 7, 4, 2.0, 5)).unwrap();
        let back = Dataset::from_bytes(&ds.to_bytes()).unwrap();
        assert_eq!(back, ds);
        let dir = std::env::temp_dir().join(format!("fedsim-ds-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("d.fedds");
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn dataset_format_errors() {
        let ds = generate_synthetic(&spec(3, 2, 2, 2.0, 5)).unwrap();
        let mut bytes = ds.to_bytes();
        bytes[2] = b'?';
        assert!(matches!(
            Dataset::from_bytes(&bytes),
            Err(FedError::Format {
                field: "magic",
                offset: 0,
                ..
            })
        ));
        assert!(matches!(
            Dataset::from_bytes(&[]),
            Err(FedError::Format { field: "magic", .. })
        ));

        let bytes = ds.to_bytes();
        assert!(matches!(
            Dataset::from_bytes(&bytes[..bytes.len() - 1]),
            Err(FedError::Format {
                field: "labels",
                ..
            })
        ));

        let mut bytes = ds.to_bytes();
        let last = bytes.len() - 2;
        bytes[last] = 7;
        match Dataset::from_bytes(&bytes) {
            Err(FedError::Format { field, offset, .. }) => {
                assert_eq!(field, "labels");
                assert_eq!(offset, last as u64);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_import() {
        let dir = std::env::temp_dir().join(format!("fedsim-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("toy.csv");
        std::fs::write(&path, "f0,f1,label\n0.5,1,0\n-2,3.25,2\n").unwrap();
        let ds = Dataset::from_csv(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.num_classes(), 3);
        assert_eq!(ds.features().row(1), &[-2.0, 3.25]);
        assert_eq!(ds.name(), "toy");
        std::fs::write(&path, "a,b\n1,0\n").unwrap();
        assert!(Dataset::from_csv(&path).is_err());
        std::fs::remove_dir_all(dir).unwrap();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn partition_is_a_disjoint_cover(
            n_clients in 1usize..30,
            alpha in 0.01f64..50.0,
            seed in any::<u64>(),
        ) {
            let ds = generate_synthetic(&spec(5, 12, 2, 1.0, 3)).unwrap();
            let pspec = PartitionSpec { num_clients: n_clients, alpha, seed };
            let parts = dirichlet_partition(&ds, &pspec).unwrap();
            prop_assert_eq!(parts.len(), n_clients);
            prop_assert_eq!(parts.iter().map(ClientPartition::len).sum::<usize>(), ds.len());
            prop_assert!(parts.iter().all(|p| !p.is_empty()));
            assert_disjoint_cover(&parts, ds.len());
            prop_assert_eq!(parts, dirichlet_partition(&ds, &pspec).unwrap());
        }
    }
}
