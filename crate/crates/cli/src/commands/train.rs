//! `train` and `eval`.

use std::path::Path;

use serde_json::{json, Value};
use sysid_core::checkpoint;
use sysid_core::metrics::{dataset_score, DatasetScore};
use sysid_core::multipath::ensemble_summary;
use sysid_core::training::train_observed;
use sysid_core::{build_model, Model, ModelKind, NeuralDataset, Scalar};

use super::load_dataset;
use crate::config::{file_digest, sha256_hex, ExperimentConfig, ModelSpec, Precision};
use crate::fail::Result;
use crate::output::{ensure_dir, write_csv, write_json, Stamp};

pub const RESULT_FILE: &str = "result.json";
pub const MODEL_FILE: &str = "model.ck";

pub fn train(config: &ExperimentConfig, out: &Path) -> Result<Value> {
    match config.precision {
        Precision::F32 => train_as::<f32>(config, out),
        Precision::F64 => train_as::<f64>(config, out),
    }
}

fn train_as<S: Scalar>(config: &ExperimentConfig, out: &Path) -> Result<Value> {
    let (ds, digest) = load_dataset::<S>(config)?;
    ensure_dir(out)?;
    let stamp = Stamp {
        config_hash: config.hash(Some(&digest)),
        seed: Some(config.seed),
    };
    let model_config = config.model.resolve(ds.num_neurons(), ds.image_shape(), config.seed)?;
    let mut model = build_model::<S>(&model_config)?;
    let extra = json!({"config_hash": stamp.config_hash, "seed": config.seed});
    let history = train_observed(&mut model, &ds, &config.run_schedule(), |phase, m| {
        checkpoint::save(m, &out.join(format!("phase{phase}.ck")), extra.clone())
    })?;
    checkpoint::save(&model, &out.join(MODEL_FILE), extra)?;
    let score = dataset_score(&model, &ds)?;

    write_csv(&out.join("history.csv"), &stamp, &history.to_csv())?;
    write_csv(&out.join("scores.csv"), &stamp, &score.to_csv())?;
    let count = model.param_count();
    let result = json!({
        "label": config.label,
        "twins": config.twins,
        "kind": model_config.kind,
        "model": ModelSpec::from_config(&model_config),
        "loss": config.schedule.loss,
        "train_fraction": config.train_fraction,
        "dataset_digest": digest,
        "score": score.mean_cc_norm2,
        "excluded_neurons": score.excluded(),
        "best_val_loss": history.best_val,
        "stop_epochs": history.stop_epochs,
        "params": {"total": count.total, "excluding_bn": count.excluding_bn, "conv": count.conv},
        "ensemble": ensemble_json(&model)?,
    });
    write_json(&out.join(RESULT_FILE), &stamp, result.clone())?;
    println!(
        "{}: test CC_norm2 {:.4}",
        config.label.as_deref().unwrap_or("model"),
        score.mean_cc_norm2
    );
    Ok(result)
}

pub fn ensemble_json<S: Scalar>(model: &Model<S>) -> Result<Value> {
    Ok(match model.config.kind {
        ModelKind::Feedforward => Value::Null,
        _ => {
            let e = ensemble_summary(model)?;
            json!({"average_length": e.average_length, "diversity": e.to_json()["diversity"]})
        }
    })
}

pub fn eval(config: &ExperimentConfig, checkpoint_path: &Path, out: &Path) -> Result<DatasetScore> {
    match config.precision {
        Precision::F32 => eval_as::<f32>(config, checkpoint_path, out),
        Precision::F64 => eval_as::<f64>(config, checkpoint_path, out),
    }
}

fn eval_as<S: Scalar>(config: &ExperimentConfig, checkpoint_path: &Path, out: &Path) -> Result<DatasetScore> {
    let (ds, digest): (NeuralDataset<S>, _) = load_dataset(config)?;
    let model = checkpoint::load::<S>(checkpoint_path)?;
    let ck_digest = file_digest(checkpoint_path)?;
    ensure_dir(out)?;
    let stamp = Stamp {
        config_hash: sha256_hex(format!("eval:{ck_digest}:{digest}:{:?}", config.truncate_trials).as_bytes()),
        seed: Some(model.config.seed),
    };
    let score = dataset_score(&model, &ds)?;
    write_csv(&out.join("scores.csv"), &stamp, &score.to_csv())?;
    write_json(
        &out.join("eval.json"),
        &stamp,
        json!({
            "checkpoint_digest": ck_digest,
            "dataset_digest": digest,
            "model": ModelSpec::from_config(&model.config),
            "score": score.mean_cc_norm2,
            "excluded_neurons": score.excluded(),
        }),
    )?;
    println!("test CC_norm2 {:.4}", score.mean_cc_norm2);
    Ok(score)
}
