//! Datasets, synthetic generation, CSV ingestion and client partitioning.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartitionError {
    #[error("{clients} clients x {quota} samples needs {needed}, only {available} available")]
    Quota {
        clients: usize,
        quota: usize,
        needed: usize,
        available: usize,
    },
    #[error("invalid partition request: {0}")]
    Invalid(String),
}

/// Inputs `[B, ...]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Labelled samples: `features` is `[N, ...]`, labels lie in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        if labels.is_empty() {
            return Err(DataError::Invalid("no samples".into()));
        }
        if features.shape().first() != Some(&labels.len()) {
            return Err(DataError::Invalid(format!(
                "features {:?} do not match {} labels",
                features.shape(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(DataError::Invalid(format!("label {y} out of range for {num_classes} classes")));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Per-sample feature shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    /// Samples at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            inputs: self.features.select_leading(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn all(&self) -> Batch {
        Batch {
            inputs: self.features.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

fn class_mean(class: usize, classes: usize, dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    if dim >= classes {
        m[class] = 1.0;
    } else if dim >= 2 {
        let angle = std::f64::consts::TAU * class as f64 / classes as f64;
        m[0] = angle.cos();
        m[1] = angle.sin();
    } else {
        m[0] = class as f64;
    }
    m
}

/// Gaussian blobs, one per class, with unit-scale means (simplex vertices
/// when `dim >= classes`, else points on a circle or a line) and isotropic
/// noise of standard deviation `spread`. Samples are ordered by class.
pub fn synth_mixture(classes: usize, dim: usize, per_class: usize, spread: f64, rng: &mut Rng) -> Result<Dataset, DataError> {
    if classes < 2 || dim == 0 || per_class == 0 {
        return Err(DataError::Invalid(format!(
            "need classes >= 2, dim >= 1, per_class >= 1 (got {classes}, {dim}, {per_class})"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(DataError::Invalid(format!("spread must be a non-negative number, got {spread}")));
    }
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let mean = class_mean(c, classes, dim);
        for _ in 0..per_class {
            for &m in &mean {
                let z: f64 = StandardNormal.sample(rng);
                data.push(m + spread * z);
            }
            labels.push(c);
        }
    }
    let features = Tensor::new(vec![classes * per_class, dim], data).map_err(|e| DataError::Invalid(e.to_string()))?;
    Dataset::new(features, labels, classes)
}

/// Disjoint per-client index lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub assignments: Vec<Vec<usize>>,
    pub samples_per_client: Vec<usize>,
    /// Dirichlet concentration, or `None` for an iid split.
    pub delta: Option<f64>,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    /// Per-client label counts.
    pub fn label_histograms(&self, labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
        self.assignments
            .iter()
            .map(|idx| {
                let mut h = vec![0; classes];
                for &i in idx {
                    h[labels[i]] += 1;
                }
                h
            })
            .collect()
    }

    /// Checks disjointness and that sizes agree with `samples_per_client`.
    pub fn validate(&self, n_total: usize) -> Result<(), PartitionError> {
        let mut seen = vec![false; n_total];
        for (k, idx) in self.assignments.iter().enumerate() {
            if idx.len() != self.samples_per_client[k] {
                return Err(PartitionError::Invalid(format!("client {k} size mismatch")));
            }
            for &i in idx {
                if i >= n_total || seen[i] {
                    return Err(PartitionError::Invalid(format!("index {i} repeated or out of range")));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }
}

fn check_quota(n_total: usize, clients: usize, quota: usize) -> Result<(), PartitionError> {
    if clients == 0 {
        return Err(PartitionError::Invalid("zero clients".into()));
    }
    let needed = clients.saturating_mul(quota);
    if needed > n_total {
        return Err(PartitionError::Quota {
            clients,
            quota,
            needed,
            available: n_total,
        });
    }
    Ok(())
}

/// Uniform random disjoint split, `quota` indices per client.
pub fn iid_partition(n_total: usize, clients: usize, quota: usize, rng: &mut Rng) -> Result<PartitionPlan, PartitionError> {
    check_quota(n_total, clients, quota)?;
    let mut idx: Vec<usize> = (0..n_total).collect();
    idx.shuffle(rng);
    let assignments = idx.chunks(quota.max(1)).take(clients).map(|c| c.to_vec()).collect::<Vec<_>>();
    let assignments = if quota == 0 { vec![Vec::new(); clients] } else { assignments };
    Ok(PartitionPlan {
        samples_per_client: vec![quota; clients],
        assignments,
        delta: None,
        seed: rng.seed(),
    })
}

fn dirichlet(delta: f64, classes: usize, rng: &mut Rng) -> Vec<f64> {
    let gamma = Gamma::new(delta, 1.0).expect("delta validated positive");
    let draws: Vec<f64> = (0..classes).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.into_iter().map(|x| x / total).collect()
    } else {
        // every draw underflowed; fall back to uniform
        vec![1.0 / classes as f64; classes]
    }
}

/// Label-skewed split: each client draws class proportions from Dir(delta)
/// and fills its quota by sampling classes from them, drawing without
/// replacement from shuffled per-class pools. When a pool empties, the
/// client's proportions are renormalized over the classes that remain.
pub fn dirichlet_partition(
    labels: &[usize],
    classes: usize,
    clients: usize,
    delta: f64,
    quota: usize,
    rng: &mut Rng,
) -> Result<PartitionPlan, PartitionError> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(PartitionError::Invalid(format!("delta must be positive, got {delta}")));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(PartitionError::Invalid(format!("label {y} out of range")));
    }
    check_quota(labels.len(), clients, quota)?;
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        pools[y].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(rng);
    }
    let mut assignments = Vec::with_capacity(clients);
    for _ in 0..clients {
        let props = dirichlet(delta, classes, rng);
        let mut mine = Vec::with_capacity(quota);
        for _ in 0..quota {
            let live: Vec<usize> = (0..classes).filter(|&c| !pools[c].is_empty()).collect();
            let mass: f64 = live.iter().map(|&c| props[c]).sum();
            let class = if mass > 0.0 {
                let mut u = rng.random::<f64>() * mass;
                let mut pick = *live.last().expect("quota check guarantees samples remain");
                for &c in &live {
                    if u < props[c] {
                        pick = c;
                        break;
                    }
                    u -= props[c];
                }
                pick
            } else {
                live[rng.random_range(0..live.len())]
            };
            mine.push(pools[class].pop().expect("live class has samples"));
        }
        assignments.push(mine);
    }
    Ok(PartitionPlan {
        samples_per_client: vec![quota; clients],
        assignments,
        delta: Some(delta),
        seed: rng.seed(),
    })
}

/// Reads `label,f0,f1,...` rows into a `[N, D]` dataset.
pub fn load_csv(path: &Path) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path).map_err(csv_error)?;
    let header = reader.headers().map_err(csv_error)?.clone();
    let width = header.len();
    let expected_header = header.get(0) == Some("label")
        && header.iter().skip(1).enumerate().all(|(j, h)| h == format!("f{j}"));
    if width < 2 || !expected_header {
        return Err(DataError::Parse {
            line: 1,
            message: "header must be label,f0,f1,...".into(),
        });
    }
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(DataError::Parse {
                line,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        let label: usize = record[0].trim().parse().map_err(|e| DataError::Parse {
            line,
            message: format!("bad label {:?}: {e}", &record[0]),
        })?;
        labels.push(label);
        for field in record.iter().skip(1) {
            let v: f64 = field.trim().parse().map_err(|e| DataError::Parse {
                line,
                message: format!("bad value {field:?}: {e}"),
            })?;
            if !v.is_finite() {
                return Err(DataError::Parse {
                    line,
                    message: format!("non-finite value {field:?}"),
                });
            }
            data.push(v);
        }
    }
    let n = labels.len();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let features = Tensor::new(vec![n, width - 1], data).map_err(|e| DataError::Invalid(e.to_string()))?;
    Dataset::new(features, labels, classes)
}

/// Writes a dataset with flat features; floats use shortest round-trip form.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let n = dataset.len();
    let d = dataset.features.len() / n;
    let mut writer = csv::Writer::from_path(path).map_err(csv_error)?;
    let mut header = vec!["label".to_string()];
    header.extend((0..d).map(|j| format!("f{j}")));
    writer.write_record(&header).map_err(csv_error)?;
    for i in 0..n {
        let mut row = vec![dataset.labels[i].to_string()];
        row.extend(dataset.features.data()[i * d..(i + 1) * d].iter().map(|v| v.to_string()));
        writer.write_record(&row).map_err(csv_error)?;
    }
    writer.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> DataError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => DataError::Io(io),
        other => DataError::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}
