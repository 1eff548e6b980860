//! Synthetic dataset generation, non-IID partitioning across genuine
//! clients, and CSV ingestion of external datasets.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::rng::{self, StreamKind};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("row {row}: label {label} is not a class id below {n_classes}")]
    LabelOutOfRange {
        row: usize,
        label: i64,
        n_classes: usize,
    },
    #[error("empty dataset")]
    Empty,
    #[error(
        "could not produce a partition with at least one example per client \
         after {attempts} attempts (n_genuine={n_genuine}, examples={examples})"
    )]
    PartitionFailed {
        attempts: usize,
        n_genuine: usize,
        examples: usize,
    },
}

/// Labeled feature matrix, row-major. Labels are class ids in `[0, n_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    feature_dim: usize,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        feature_dim: usize,
        labels: Vec<usize>,
        n_classes: usize,
    ) -> Self {
        assert_eq!(features.len(), labels.len() * feature_dim);
        assert!(labels.iter().all(|&l| l < n_classes));
        Self {
            features,
            feature_dim,
            labels,
            n_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// New dataset holding the given rows, in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.feature_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.label(i));
        }
        Dataset {
            features,
            feature_dim: self.feature_dim,
            labels,
            n_classes: self.n_classes,
        }
    }
}

/// A genuine client's slice of the population dataset.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub client_id: usize,
    pub indices: Vec<usize>,
}

/// Controls how the population dataset is split across genuine clients.
#[derive(Debug, Clone, Copy)]
pub struct PartitionSpec {
    pub n_genuine: usize,
    /// Non-IID degree in `[1/C, 1]`; `1/C` is IID, `1` gives each client
    /// group all and only its own class.
    pub q: f64,
    pub seed: u64,
}

/// `C` Gaussian clusters with labels equal to the cluster id; deterministic
/// per seed. Cluster centers are standard normal, examples are
/// `center + spread * N(0, I)`.
pub fn make_blobs(
    n_classes: usize,
    per_class: usize,
    feature_dim: usize,
    spread: f64,
    seed: u64,
) -> Dataset {
    assert!(n_classes > 0 && per_class > 0 && feature_dim > 0);
    let mut rng = rng::stream(seed, StreamKind::DataGen, 0, 0);
    let normal = StandardNormal;
    let centers: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| (0..feature_dim).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    let mut features = Vec::with_capacity(n_classes * per_class * feature_dim);
    let mut labels = Vec::with_capacity(n_classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &cj in center {
                let noise: f64 = normal.sample(&mut rng);
                features.push(cj + spread * noise);
            }
            labels.push(c);
        }
    }
    Dataset::new(features, feature_dim, labels, n_classes)
}

/// Contiguous equal-size client groups by id, remainder spread to the
/// first groups. Returns `group -> (start, end)` client id ranges.
fn client_groups(n_genuine: usize, n_classes: usize) -> Vec<(usize, usize)> {
    let base = n_genuine / n_classes;
    let rem = n_genuine % n_classes;
    let mut out = Vec::with_capacity(n_classes);
    let mut start = 0;
    for g in 0..n_classes {
        let size = base + usize::from(g < rem);
        out.push((start, start + size));
        start += size;
    }
    out
}

/// Splits clients into `C` groups; each class-`l` example goes to a uniform
/// client inside group `l` with probability `q`, and to a uniform client of
/// one specific other group with probability `(1-q)/(C-1)`.
///
/// The partition seed is rejection-resampled up to 100 times until every
/// client holds at least one example.
pub fn partition_noniid(
    data: &Dataset,
    spec: &PartitionSpec,
) -> Result<Vec<ClientDataset>, DataError> {
    if data.is_empty() {
        return Err(DataError::Empty);
    }
    let n_classes = data.n_classes();
    let groups = client_groups(spec.n_genuine, n_classes);
    const MAX_ATTEMPTS: usize = 100;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = rng::stream(spec.seed, StreamKind::Partition, attempt as u64, 0);
        let mut clients: Vec<ClientDataset> = (0..spec.n_genuine)
            .map(|client_id| ClientDataset {
                client_id,
                indices: Vec::new(),
            })
            .collect();
        for i in 0..data.len() {
            let l = data.label(i);
            let group = if n_classes == 1 || rng.random::<f64>() < spec.q {
                l
            } else {
                // Uniform over the other C-1 groups.
                let mut g = rng.random_range(0..n_classes - 1);
                if g >= l {
                    g += 1;
                }
                g
            };
            let (start, end) = groups[group];
            if start == end {
                // A group can be empty only when n_genuine < C; dump the
                // example on a uniform client instead.
                let c = rng.random_range(0..spec.n_genuine);
                clients[c].indices.push(i);
            } else {
                let c = rng.random_range(start..end);
                clients[c].indices.push(i);
            }
        }
        if clients.iter().all(|c| !c.indices.is_empty()) {
            return Ok(clients);
        }
    }
    Err(DataError::PartitionFailed {
        attempts: MAX_ATTEMPTS,
        n_genuine: spec.n_genuine,
        examples: data.len(),
    })
}

/// Uniform sample of `size` rows without replacement, for the trust-root
/// dataset held by the server.
pub fn sample_root(data: &Dataset, size: usize, seed: u64) -> Dataset {
    let mut rng = rng::stream(seed, StreamKind::Defense, 0, 0);
    let mut indices: Vec<usize> = (0..data.len()).collect();
    indices.shuffle(&mut rng);
    indices.truncate(size.min(data.len()));
    data.subset(&indices)
}

/// Parses a `f0,...,fk,label` CSV file into a dataset. The class count is
/// one plus the largest label seen.
pub fn load_csv(path: &Path) -> Result<Dataset, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = text.lines();
    let header = lines.next().ok_or(DataError::Empty)?;
    let n_cols = header.split(',').count();
    if n_cols < 2 {
        return Err(DataError::MalformedRow {
            row: 0,
            reason: "header needs at least one feature column and a label".into(),
        });
    }
    let feature_dim = n_cols - 1;
    let mut features = Vec::new();
    let mut labels: Vec<i64> = Vec::new();
    for (row, line) in lines.enumerate() {
        let row = row + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != n_cols {
            return Err(DataError::MalformedRow {
                row,
                reason: format!("expected {n_cols} cells, found {}", cells.len()),
            });
        }
        for cell in &cells[..feature_dim] {
            let v: f64 = cell.trim().parse().map_err(|_| DataError::MalformedRow {
                row,
                reason: format!("non-numeric feature cell {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(DataError::MalformedRow {
                    row,
                    reason: format!("non-finite feature cell {cell:?}"),
                });
            }
            features.push(v);
        }
        let label: i64 = cells[feature_dim]
            .trim()
            .parse()
            .map_err(|_| DataError::MalformedRow {
                row,
                reason: format!("non-integer label {:?}", cells[feature_dim]),
            })?;
        if label < 0 {
            return Err(DataError::MalformedRow {
                row,
                reason: format!("negative label {label}"),
            });
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(DataError::Empty);
    }
    let n_classes = (*labels.iter().max().unwrap() + 1) as usize;
    let labels = labels.into_iter().map(|l| l as usize).collect();
    Ok(Dataset::new(features, feature_dim, labels, n_classes))
}

/// Writes the `f0,...,fk,label` format read back by [`load_csv`].
pub fn save_csv(data: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    let header: Vec<String> = (0..data.feature_dim()).map(|j| format!("f{j}")).collect();
    let _ = writeln!(out, "{},label", header.join(","));
    for i in 0..data.len() {
        for v in data.row(i) {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{}", data.label(i));
    }
    std::fs::write(path, out).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}
