//! Experiment configuration, presets and dataset preparation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    dirichlet_partition, generate_domain_pair, stratified_split, ClientPartition, Dataset,
    DomainPairSpec, PartitionSpec, SyntheticSpec,
};
use crate::error::{FedError, Result};
use crate::federation::{run_federation, FederationConfig, FederationOutcome, Strategy};
use crate::seed::{derive_seed, Stream};

/// Where the source and target datasets come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub source_samples_per_class: usize,
    pub feature_dim: usize,
    pub class_separation: f64,
    pub clusters_per_class: usize,
    pub domain_shift: f64,
    /// Seed of the synthetic generator; derived from the master seed when absent.
    pub seed: Option<u64>,
    /// Dataset files (`.fedds` binary or `.csv`) replacing the generator.
    pub source_path: Option<PathBuf>,
    pub target_path: Option<PathBuf>,
    /// Held-out share of every target class.
    pub test_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            samples_per_class: 150,
            source_samples_per_class: 300,
            feature_dim: 32,
            class_separation: 4.0,
            clusters_per_class: 2,
            domain_shift: 0.5,
            seed: None,
            source_path: None,
            target_path: None,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub alpha: f64,
    /// Derived from the master seed when absent.
    pub seed: Option<u64>,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Pairwise CKA of the last round's client models.
    pub cka: bool,
    pub entropy_histogram: bool,
    pub selection_dump: bool,
    pub histogram_bins: usize,
    /// Accuracy threshold for rounds-to-threshold in comparisons.
    pub accuracy_threshold: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            cka: false,
            entropy_histogram: false,
            selection_dump: false,
            histogram_bins: 20,
            accuracy_threshold: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub federation: FederationConfig,
    pub analysis: AnalysisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            dataset: DatasetConfig::default(),
            partition: PartitionConfig::default(),
            federation: FederationConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

/// Named presets.
pub const PRESETS: [&str; 3] = ["desk-default", "desk-alpha05", "smoke"];

impl ExperimentConfig {
    /// Desk-scale presets: E = 5, lr = 0.1, momentum 0.5 and rho = 0.1 on a
    /// synthetic 10-class task with 20 clients and 30 rounds.
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        match name {
            "desk-default" => {}
            "desk-alpha05" => c.partition.alpha = 0.5,
            "smoke" => {
                c.dataset.samples_per_class = 20;
                c.dataset.source_samples_per_class = 20;
                c.dataset.feature_dim = 8;
                c.federation.num_clients = 4;
                c.federation.rounds = 2;
                c.federation.local_epochs = 1;
                c.federation.pretrain_epochs = 2;
                c.federation.hidden_widths = vec![16, 16];
            }
            other => {
                return Err(FedError::Config(format!(
                    "unknown preset {other:?} (known: {})",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(c)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| FedError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every invariant before any computation starts.
    pub fn validate(&self) -> Result<()> {
        self.federation.validate()?;
        let d = &self.dataset;
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return Err(FedError::Config(format!(
                "test_fraction must lie in (0, 1), got {}",
                d.test_fraction
            )));
        }
        if d.target_path.is_none() {
            if d.num_classes < 2 || d.samples_per_class == 0 || d.feature_dim == 0 {
                return Err(FedError::Config(
                    "synthetic dataset needs >= 2 classes and samples".into(),
                ));
            }
            if d.source_samples_per_class == 0 && self.federation.pretrain_epochs > 0 {
                return Err(FedError::Config("pretraining needs source samples".into()));
            }
            if !(d.class_separation >= 0.0 && d.domain_shift >= 0.0) {
                return Err(FedError::Config(
                    "separation and shift must be nonnegative".into(),
                ));
            }
        }
        for p in [&d.source_path, &d.target_path].into_iter().flatten() {
            if !p.is_file() {
                return Err(FedError::Config(format!(
                    "dataset file {} not found",
                    p.display()
                )));
            }
        }
        if !(self.partition.alpha > 0.0 && self.partition.alpha.is_finite()) {
            return Err(FedError::Config(format!(
                "alpha must be positive, got {}",
                self.partition.alpha
            )));
        }
        if self.analysis.histogram_bins < 2 {
            return Err(FedError::Config("histogram_bins must be at least 2".into()));
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        self.dataset
            .seed
            .unwrap_or_else(|| derive_seed(self.federation.master_seed, Stream::Data, &[]))
    }

    pub fn partition_seed(&self) -> u64 {
        self.partition
            .seed
            .unwrap_or_else(|| derive_seed(self.federation.master_seed, Stream::Partition, &[]))
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.federation.master_seed, Stream::Split, &[])
    }

    /// Generates (or loads) the source and target datasets.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.dataset;
        let synthetic = || {
            generate_domain_pair(&DomainPairSpec {
                target: SyntheticSpec {
                    num_classes: d.num_classes,
                    samples_per_class: d.samples_per_class,
                    feature_dim: d.feature_dim,
                    class_separation: d.class_separation,
                    seed: self.data_seed(),
                },
                source_samples_per_class: d.source_samples_per_class.max(1),
                clusters_per_class: d.clusters_per_class,
                domain_shift: d.domain_shift,
            })
        };
        match (&d.source_path, &d.target_path) {
            (Some(s), Some(t)) => Ok((load_any(s)?, load_any(t)?)),
            (None, None) => synthetic(),
            (None, Some(t)) => Ok((synthetic()?.0, load_any(t)?)),
            (Some(s), None) => Ok((load_any(s)?, synthetic()?.1)),
        }
    }

    /// Splits the target into train and test, then partitions the train side.
    pub fn prepare(&self) -> Result<Prepared> {
        self.validate()?;
        let (source, target) = self.datasets()?;
        Prepared::from_datasets(self, source, target)
    }

    /// [`ExperimentConfig::prepare`] followed by the full run.
    pub fn run(&self) -> Result<(Prepared, FederationOutcome)> {
        let prepared = self.prepare()?;
        let outcome = prepared.run(&self.federation)?;
        Ok((prepared, outcome))
    }

    /// Same experiment with another strategy.
    pub fn with_strategy(&self, strategy: Strategy) -> Self {
        let mut c = self.clone();
        c.federation.strategy = strategy;
        c
    }
}

/// Reads a dataset, choosing the format from the extension.
pub fn load_any(path: &Path) -> Result<Dataset> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => Dataset::from_csv(path),
        _ => Dataset::load(path),
    }
}

/// Datasets ready for a run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub source: Dataset,
    pub target: Dataset,
    pub train: Dataset,
    pub test: Dataset,
    pub partitions: Vec<ClientPartition>,
}

impl Prepared {
    pub fn from_datasets(
        config: &ExperimentConfig,
        source: Dataset,
        target: Dataset,
    ) -> Result<Self> {
        let (train, test) =
            stratified_split(&target, config.dataset.test_fraction, config.split_seed())?;
        let partitions = dirichlet_partition(
            &train,
            &PartitionSpec {
                num_clients: config.federation.num_clients,
                alpha: config.partition.alpha,
                seed: config.partition_seed(),
            },
        )?;
        Ok(Self {
            source,
            target,
            train,
            test,
            partitions,
        })
    }

    pub fn run(&self, config: &FederationConfig) -> Result<FederationOutcome> {
        run_federation(
            config,
            Some(&self.source),
            &self.train,
            &self.test,
            &self.partitions,
        )
    }
}
