//! Experiment configuration: one JSON document per invocation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use sysid_core::data::TeacherSpec;
use sysid_core::model::BnActOrder;
use sysid_core::training::TrainSchedule;
use sysid_core::{Activation, LossKind, ModelConfig, ModelKind, ReadoutMode};

use crate::fail::{config_err, Result};

/// Environment variable that overrides `output_dir`.
pub const OUT_ENV: &str = "SYSID_OUT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// Architecture before the dataset fixes the neuron count and image size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub channels: usize,
    /// Feedforward models: total block count.
    pub blocks: usize,
    /// Recurrent and multi-path models: blocks after the first.
    pub recurrent_layers: usize,
    pub iterations: usize,
    pub readout_mode: ReadoutMode,
    pub activation: Activation,
    pub bn_act_order: BnActOrder,
    pub first_kernel: usize,
    pub later_kernel: usize,
    pub removed_lengths: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            kind: ModelKind::Recurrent,
            channels: 8,
            blocks: 3,
            recurrent_layers: 1,
            iterations: 3,
            readout_mode: ReadoutMode::TwoAvg,
            activation: Activation::Softplus,
            bn_act_order: BnActOrder::BnBeforeAct,
            first_kernel: 9,
            later_kernel: 3,
            removed_lengths: Vec::new(),
        }
    }
}

impl ModelSpec {
    pub fn resolve(&self, num_neurons: usize, input_shape: (usize, usize), seed: u64) -> Result<ModelConfig> {
        let base = match self.kind {
            ModelKind::Feedforward => ModelConfig::feedforward(self.blocks, self.channels),
            _ => ModelConfig::recurrent(self.recurrent_layers, self.channels, self.iterations, self.readout_mode),
        };
        let config = ModelConfig {
            kind: self.kind,
            activation: self.activation,
            bn_act_order: self.bn_act_order,
            first_kernel: self.first_kernel,
            later_kernel: self.later_kernel,
            removed_lengths: self.removed_lengths.clone(),
            num_neurons,
            input_shape,
            seed,
            ..base
        };
        config.validate()?;
        Ok(config)
    }

    pub fn from_config(c: &ModelConfig) -> Self {
        ModelSpec {
            kind: c.kind,
            channels: c.channels,
            blocks: match c.kind {
                ModelKind::Feedforward => c.num_blocks,
                _ => ModelSpec::default().blocks,
            },
            recurrent_layers: c.recurrent_layers(),
            iterations: c.iterations,
            readout_mode: c.readout_mode,
            activation: c.activation,
            bn_act_order: c.bn_act_order,
            first_kernel: c.first_kernel,
            later_kernel: c.later_kernel,
            removed_lengths: c.removed_lengths.clone(),
        }
    }
}

/// Hyperparameter grid for `sweep`. An empty list keeps the value of `model`/`schedule`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub channels: Vec<usize>,
    pub recurrent_layers: Vec<usize>,
    pub iterations: Vec<usize>,
    pub readout_modes: Vec<ReadoutMode>,
    pub activations: Vec<Activation>,
    pub bn_act_orders: Vec<BnActOrder>,
    pub losses: Vec<LossKind>,
    pub seeds: Vec<u64>,
    pub train_fractions: Vec<f64>,
    /// Also train a multi-path twin of every recurrent run.
    pub multipath_twins: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub block: usize,
    pub image_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            block: 1,
            image_size: sysid_core::neurophys::PROBE_SIZE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub dataset: Option<PathBuf>,
    pub truncate_trials: Option<usize>,
    pub precision: Precision,
    pub seed: u64,
    pub train_fraction: f64,
    pub model: ModelSpec,
    pub schedule: TrainSchedule,
    pub grid: Grid,
    pub teacher: TeacherSpec,
    pub probe: ProbeConfig,
    /// Run bookkeeping set by `sweep` and `ablate`.
    pub label: Option<String>,
    pub twins: std::collections::BTreeMap<String, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("results"),
            dataset: None,
            truncate_trials: None,
            precision: Precision::default(),
            seed: 0,
            train_fraction: 1.0,
            model: ModelSpec::default(),
            schedule: TrainSchedule::default(),
            grid: Grid::default(),
            teacher: TeacherSpec::default(),
            probe: ProbeConfig::default(),
            label: None,
            twins: Default::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` (or the defaults) and applies the output-directory override from the
    /// environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| config_err(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| config_err(format!("config {}: {e}", p.display())))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(dir) = std::env::var_os(OUT_ENV) {
            config.output_dir = PathBuf::from(dir);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(config_err(format!("train_fraction {} outside (0, 1]", self.train_fraction)));
        }
        if self.truncate_trials == Some(0) {
            return Err(config_err("truncate_trials must be positive"));
        }
        if self.grid.train_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(config_err("grid train fractions must lie in (0, 1]"));
        }
        self.schedule.validate()?;
        Ok(())
    }

    /// Schedule of a single run: the configured one with this run's seed and fraction.
    pub fn run_schedule(&self) -> TrainSchedule {
        TrainSchedule {
            seed: self.seed,
            train_fraction: self.train_fraction,
            ..self.schedule.clone()
        }
    }

    /// Hex SHA-256 of the canonical JSON of the configuration, leaving out where outputs
    /// go and where the dataset lives; `dataset_digest` stands in for the latter.
    pub fn hash(&self, dataset_digest: Option<&str>) -> String {
        let mut v = serde_json::to_value(self).expect("configs serialize");
        if let Value::Object(map) = &mut v {
            map.remove("output_dir");
            map.remove("dataset");
            map.insert("dataset_digest".into(), dataset_digest.map_or(Value::Null, |d| Value::String(d.into())));
        }
        sha256_hex(v.to_string().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| crate::fail::data_err(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_hash_ignores_paths() {
        let c = ExperimentConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        let moved = ExperimentConfig {
            output_dir: "elsewhere".into(),
            dataset: Some("x/y.sysid".into()),
            ..c.clone()
        };
        assert_eq!(moved.hash(Some("d")), c.hash(Some("d")));
        assert_ne!(c.hash(Some("d")), c.hash(Some("e")));
        assert_ne!(ExperimentConfig { seed: 1, ..c.clone() }.hash(None), c.hash(None));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"modle": {}}"#).is_err());
        let c: ExperimentConfig = serde_json::from_str(r#"{"model": {"kind": "feedforward", "blocks": 2}}"#).unwrap();
        assert_eq!(c.model.kind, ModelKind::Feedforward);
        assert_eq!(c.model.channels, 8);
    }

    #[test]
    fn spec_resolves_against_dataset() {
        let spec = ModelSpec {
            iterations: 5,
            ..ModelSpec::default()
        };
        let m = spec.resolve(12, (32, 32), 7).unwrap();
        assert_eq!((m.num_blocks, m.iterations, m.seed), (2, 5, 7));
        assert_eq!(ModelSpec::from_config(&m), spec);
        assert!(ModelSpec { iterations: 9, ..spec }.resolve(12, (32, 32), 0).is_err());
    }
}
