//! Flat key-value experiment configuration with schema versioning.
//!
//! Relative paths resolve against the directory the config file lives in,
//! so preset files can be invoked from anywhere in the tree.

use crate::cluster::{ClusterConfig, SyncMode};
use crate::model::{LayerSpec, ModelError, NetworkModel};
use crate::numeric::ActivationKind;
use crate::partition::MaskPolicy;
use crate::trainer::{Hyperparams, TrainOptions};
use serde::Deserialize;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unsupported schema_version {0}, expected {SCHEMA_VERSION}")]
    SchemaVersion(u32),
    #[error("referenced path does not exist: {0}")]
    MissingPath(PathBuf),
    #[error("invalid config value: {0}")]
    Invalid(String),
}

fn default_true() -> bool {
    true
}

fn default_hidden_layers() -> Vec<usize> {
    vec![512]
}

fn default_hidden_activation() -> String {
    "relu".into()
}

fn default_eval_interval() -> u64 {
    500
}

fn default_groups() -> usize {
    1
}

fn default_tasks_per_group() -> usize {
    1
}

fn default_sync_mode() -> SyncMode {
    SyncMode::AllReduce
}

fn default_batch_buckets() -> usize {
    4
}

fn default_eval_chunks() -> usize {
    8
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// One experiment, fully described. Loaded from a flat TOML document.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub deterministic: bool,

    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Optional cap on examples read from each set (desk-scale runs).
    #[serde(default)]
    pub train_subset: Option<usize>,
    #[serde(default)]
    pub test_subset: Option<usize>,

    #[serde(default = "default_hidden_layers")]
    pub hidden_layers: Vec<usize>,
    #[serde(default = "default_hidden_activation")]
    pub hidden_activation: String,
    #[serde(default = "default_true")]
    pub use_bias: bool,
    /// Keep-probability of input units during training.
    pub input_retention: f64,
    /// Keep-probability of hidden units during training.
    pub hidden_retention: f64,

    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_iterations: u64,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: u64,

    #[serde(default = "default_groups")]
    pub groups: usize,
    #[serde(default = "default_tasks_per_group")]
    pub tasks_per_group: usize,
    #[serde(default = "default_sync_mode")]
    pub sync_mode: SyncMode,
    #[serde(default)]
    pub max_staleness: Option<u64>,

    #[serde(default)]
    pub connection_drop_probability: f64,
    #[serde(default)]
    pub refresh_mask_per_batch: bool,

    #[serde(default = "default_batch_buckets")]
    pub batch_buckets: usize,
    #[serde(default = "default_eval_chunks")]
    pub eval_chunks: usize,

    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Parses a config document and validates it against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut config: ExperimentConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if config.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::SchemaVersion(config.schema_version));
        }
        config.resolve_paths(base_dir);
        config.validate()?;
        Ok(config)
    }

    /// Loads a config file, resolving relative paths against its parent
    /// directory.
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.train_images,
            &mut self.train_labels,
            &mut self.test_images,
            &mut self.test_labels,
            &mut self.output_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        for p in [
            &self.train_images,
            &self.train_labels,
            &self.test_images,
            &self.test_labels,
        ] {
            if !p.exists() {
                return Err(ConfigError::MissingPath(p.clone()));
            }
        }
        self.parse_hidden_activation()?;
        if self.hidden_layers.is_empty() {
            return Err(ConfigError::Invalid("hidden_layers must not be empty".into()));
        }
        self.hyperparams()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.mask_policy()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.cluster()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    fn parse_hidden_activation(&self) -> Result<ActivationKind, ConfigError> {
        match self.hidden_activation.as_str() {
            "relu" => Ok(ActivationKind::ReLU),
            "tanh" => Ok(ActivationKind::Tanh),
            "sigmoid" => Ok(ActivationKind::Sigmoid),
            "identity" => Ok(ActivationKind::Identity),
            other => Err(ConfigError::Invalid(format!(
                "unknown hidden_activation {other:?}"
            ))),
        }
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            input_retention: self.input_retention,
            hidden_retention: self.hidden_retention,
            batch_size: self.batch_size,
            max_iterations: self.max_iterations,
        }
    }

    pub fn cluster(&self) -> ClusterConfig {
        ClusterConfig {
            n_groups: self.groups,
            tasks_per_group: self.tasks_per_group,
            sync_mode: self.sync_mode,
            deterministic: self.deterministic,
            seed: self.seed,
            max_staleness: self.max_staleness,
        }
    }

    pub fn mask_policy(&self) -> Result<MaskPolicy, crate::partition::PartitionError> {
        MaskPolicy::new(self.connection_drop_probability)
    }

    pub fn options(&self) -> Result<TrainOptions, ConfigError> {
        Ok(TrainOptions {
            eval_interval: self.eval_interval,
            mask_policy: self
                .mask_policy()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?,
            refresh_mask_per_batch: self.refresh_mask_per_batch,
            batch_buckets: self.batch_buckets,
            eval_chunks: self.eval_chunks,
        })
    }

    /// Builds the architecture this config describes for the given data
    /// shape: dropout input, dropout hidden layers, softmax output.
    pub fn build_model(&self, input_dim: usize, n_classes: usize) -> Result<NetworkModel, ModelError> {
        let hidden_activation = self
            .parse_hidden_activation()
            .expect("validated at load time");
        let mut model = NetworkModel::new(self.seed).with_bias(self.use_bias);
        model.add_layer(input_layer(input_dim, self.input_retention))?;
        for &units in &self.hidden_layers {
            model.add_layer(hidden_layer(units, hidden_activation, self.hidden_retention))?;
        }
        model.add_layer(LayerSpec::standard(n_classes, ActivationKind::SoftmaxOutput))?;
        Ok(model)
    }
}

fn input_layer(units: usize, retention: f64) -> LayerSpec {
    if retention < 1.0 {
        LayerSpec::dropout(units, ActivationKind::Identity, retention)
    } else {
        LayerSpec::standard(units, ActivationKind::Identity)
    }
}

fn hidden_layer(units: usize, activation: ActivationKind, retention: f64) -> LayerSpec {
    if retention < 1.0 {
        LayerSpec::dropout(units, activation, retention)
    } else {
        LayerSpec::standard(units, activation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuron::NeuronKind;
    use std::fs::File;
    use std::io::Write;

    fn minimal_toml(dir: &Path) -> String {
        for name in ["ti", "tl", "ei", "el"] {
            File::create(dir.join(name))
                .unwrap()
                .write_all(b"x")
                .unwrap();
        }
        r#"
schema_version = 1
seed = 7
train_images = "ti"
train_labels = "tl"
test_images = "ei"
test_labels = "el"
input_retention = 0.8
hidden_retention = 0.5
learning_rate = 0.3
momentum = 0.98
batch_size = 100
max_iterations = 1000
"#
        .to_string()
    }

    #[test]
    fn parses_minimal_config_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let text = minimal_toml(dir.path());
        let c = ExperimentConfig::from_toml(&text, dir.path()).unwrap();
        assert_eq!(c.hidden_layers, vec![512]);
        assert_eq!(c.eval_interval, 500);
        assert_eq!(c.sync_mode, SyncMode::AllReduce);
        assert!(c.deterministic);
        assert_eq!(c.groups, 1);
        assert!(c.train_images.starts_with(dir.path()));
        let hp = c.hyperparams();
        assert_eq!(hp.learning_rate, 0.3);
        assert_eq!(hp.momentum, 0.98);
    }

    #[test]
    fn rejects_wrong_schema_version() {
        let dir = tempfile::tempdir().unwrap();
        let text = minimal_toml(dir.path()).replace("schema_version = 1", "schema_version = 2");
        assert!(matches!(
            ExperimentConfig::from_toml(&text, dir.path()),
            Err(ConfigError::SchemaVersion(2))
        ));
    }

    #[test]
    fn rejects_missing_seed() {
        let dir = tempfile::tempdir().unwrap();
        let text = minimal_toml(dir.path()).replace("seed = 7\n", "");
        assert!(matches!(
            ExperimentConfig::from_toml(&text, dir.path()),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn rejects_missing_data_path() {
        let dir = tempfile::tempdir().unwrap();
        let text = minimal_toml(dir.path()).replace("\"ti\"", "\"nonexistent\"");
        assert!(matches!(
            ExperimentConfig::from_toml(&text, dir.path()),
            Err(ConfigError::MissingPath(_))
        ));
    }

    #[test]
    fn rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!("{}\nmystery_knob = 3\n", minimal_toml(dir.path()));
        assert!(matches!(
            ExperimentConfig::from_toml(&text, dir.path()),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn builds_described_model() {
        let dir = tempfile::tempdir().unwrap();
        let text = minimal_toml(dir.path());
        let c = ExperimentConfig::from_toml(&text, dir.path()).unwrap();
        let m = c.build_model(784, 10).unwrap();
        assert_eq!(m.layer_units(), vec![784, 512, 10]);
        assert!(matches!(
            m.layers()[0].neuron_kind,
            NeuronKind::Dropout { retention } if retention == 0.8
        ));
        assert!(matches!(
            m.layers()[1].neuron_kind,
            NeuronKind::Dropout { retention } if retention == 0.5
        ));
        assert_eq!(m.layers()[1].activation, ActivationKind::ReLU);
        assert!(matches!(m.layers()[2].neuron_kind, NeuronKind::Standard));
    }

    #[test]
    fn full_retention_builds_standard_layers() {
        let dir = tempfile::tempdir().unwrap();
        let text = minimal_toml(dir.path())
            .replace("input_retention = 0.8", "input_retention = 1.0")
            .replace("hidden_retention = 0.5", "hidden_retention = 1.0");
        let c = ExperimentConfig::from_toml(&text, dir.path()).unwrap();
        let m = c.build_model(8, 3).unwrap();
        assert!(m
            .layers()
            .iter()
            .all(|l| matches!(l.neuron_kind, NeuronKind::Standard)));
    }
}
