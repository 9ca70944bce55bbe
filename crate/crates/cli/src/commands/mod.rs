pub mod ablate;
pub mod data;
pub mod jobs;
pub mod multipath;
pub mod neurophys;
pub mod report;
pub mod sweep;
pub mod train;

use std::path::{Path, PathBuf};

use sysid_core::{NeuralDataset, Scalar};

use crate::config::{file_digest, ExperimentConfig};
use crate::fail::{config_err, Result};

/// The dataset named by `--dataset` or the configuration, with its file digest.
pub fn load_dataset<S: Scalar>(config: &ExperimentConfig) -> Result<(NeuralDataset<S>, String)> {
    let path = dataset_path(config)?;
    let digest = file_digest(&path)?;
    let mut ds = NeuralDataset::<f64>::load(&path, false)?;
    if let Some(k) = config.truncate_trials {
        ds.truncate_trials(k)?;
    }
    Ok((ds.cast::<S>(), digest))
}

pub fn dataset_path(config: &ExperimentConfig) -> Result<PathBuf> {
    config
        .dataset
        .clone()
        .ok_or_else(|| config_err("no dataset given; pass --dataset or set `dataset` in the config"))
}

/// `--out` beats the configured (possibly environment-overridden) directory.
pub fn out_dir(config: &ExperimentConfig, flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf).unwrap_or_else(|| config.output_dir.clone())
}
