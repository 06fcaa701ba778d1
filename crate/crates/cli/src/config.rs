//! Experiment configuration: strict JSON, validated, hashed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use flatfed_core::curvature::CurvatureOptions;
use flatfed_core::data::{dirichlet_partition, iid_partition, load_csv, synth_mixture, Dataset, PartitionPlan};
use flatfed_core::fed::AlgoConfig;
use flatfed_core::model::ModelSpec;
use flatfed_core::rng::{label, Rng};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        classes: usize,
        dim: usize,
        per_class: usize,
        spread: f64,
        /// Held-out samples per class, drawn from the same mixture.
        #[serde(default)]
        test_per_class: usize,
    },
    Csv {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionConfig {
    Iid { clients: usize, quota: usize },
    Dirichlet { delta: f64, clients: usize, quota: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CurvatureSchedule {
    /// Completed-round counts after which diagnostics run (0 = initial model).
    #[serde(default)]
    pub rounds: Vec<usize>,
    #[serde(default)]
    pub options: CurvatureOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub model: ModelSpec,
    pub algo: AlgoConfig,
    #[serde(default)]
    pub curvature: CurvatureSchedule,
    /// Fill the wall_ms column. Off by default so reruns are byte-identical.
    #[serde(default)]
    pub record_wall_time: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// Training and test data plus the client split.
pub struct Materialized {
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub plan: PartitionPlan,
}

impl ExperimentConfig {
    pub fn from_str(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let field = |name: &str, msg: String| Err(CliError::Config(format!("{name}: {msg}")));
        self.model
            .layout()
            .map_err(|e| CliError::Config(format!("model: {e}")))?;
        self.algo.validate().map_err(|e| CliError::Config(format!("algo: {}", e.0)))?;
        match &self.dataset {
            DatasetConfig::Synthetic {
                classes,
                dim,
                per_class,
                spread,
                ..
            } => {
                if *classes < 2 || *dim == 0 || *per_class == 0 {
                    return field("dataset", "needs classes >= 2, dim >= 1, per_class >= 1".into());
                }
                if !(*spread >= 0.0) {
                    return field("dataset.spread", format!("must be non-negative, got {spread}"));
                }
                if self.model.input_shape != [*dim] || self.model.num_classes != *classes {
                    return field(
                        "model",
                        format!("expects input {:?} and {} classes, dataset gives [{dim}] and {classes}",
                            self.model.input_shape, self.model.num_classes),
                    );
                }
            }
            DatasetConfig::Csv { .. } => {}
        }
        let (clients, quota) = match self.partition {
            PartitionConfig::Iid { clients, quota } => (clients, quota),
            PartitionConfig::Dirichlet { delta, clients, quota } => {
                if !(delta > 0.0) {
                    return field("partition.delta", format!("must be positive, got {delta}"));
                }
                (clients, quota)
            }
        };
        if clients == 0 || quota == 0 {
            return field("partition", "clients and quota must be at least 1".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn num_clients(&self) -> usize {
        match self.partition {
            PartitionConfig::Iid { clients, .. } | PartitionConfig::Dirichlet { clients, .. } => clients,
        }
    }

    /// Builds datasets and the partition from the seed.
    pub fn materialize(&self) -> Result<Materialized, CliError> {
        let root = Rng::new(self.seed);
        let (train, test) = match &self.dataset {
            DatasetConfig::Synthetic {
                classes,
                dim,
                per_class,
                spread,
                test_per_class,
            } => {
                let data_err = |e: flatfed_core::data::DataError| CliError::Config(format!("dataset: {e}"));
                let train = synth_mixture(*classes, *dim, *per_class, *spread, &mut root.child(label::DATA))
                    .map_err(data_err)?;
                let test = if *test_per_class > 0 {
                    Some(
                        synth_mixture(*classes, *dim, *test_per_class, *spread, &mut root.child(label::TEST_DATA))
                            .map_err(data_err)?,
                    )
                } else {
                    None
                };
                (train, test)
            }
            DatasetConfig::Csv { train, test } => {
                let load = |p: &Path| load_csv(p).map_err(|e| CliError::Config(format!("dataset {}: {e}", p.display())));
                (load(train)?, test.as_deref().map(load).transpose()?)
            }
        };
        if train.sample_shape() != self.model.input_shape.as_slice() {
            return Err(CliError::Config(format!(
                "model: input shape {:?} does not match data samples {:?}",
                self.model.input_shape,
                train.sample_shape()
            )));
        }
        let mut prng = root.child(label::PARTITION);
        let plan = match self.partition {
            PartitionConfig::Iid { clients, quota } => iid_partition(train.len(), clients, quota, &mut prng),
            PartitionConfig::Dirichlet { delta, clients, quota } => {
                dirichlet_partition(train.labels(), train.num_classes(), clients, delta, quota, &mut prng)
            }
        }
        .map_err(|e| CliError::Config(format!("partition: {e}")))?;
        Ok(Materialized { train, test, plan })
    }
}
