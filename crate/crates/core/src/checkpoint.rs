//! Model checkpoints: the model configuration in the container metadata, every
//! parameter and running statistic as a named `f64` blob.

use std::path::Path;

use serde_json::{json, Value};

use crate::container::{BlobData, Container, CHECKPOINT_MAGIC};
use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};
use crate::scalar::Scalar;

/// Packs a model into a container. `extra` is stored under `meta.extra`.
pub fn to_container<S: Scalar>(model: &Model<S>, extra: Value) -> Result<Container> {
    let mut c = Container::new(json!({
        "format": "checkpoint",
        "config": serde_json::to_value(&model.config)?,
        "extra": extra,
    }));
    for (name, _, t) in model.params() {
        let data = t.data().iter().map(|v| v.as_f64()).collect();
        c.push(name, t.shape(), BlobData::F64(data))?;
    }
    for (name, v) in model.buffers() {
        let data = v.iter().map(|x| x.as_f64()).collect();
        c.push(name, &[v.len()], BlobData::F64(data))?;
    }
    Ok(c)
}

pub fn from_container<S: Scalar>(c: &Container) -> Result<Model<S>> {
    let config: ModelConfig = serde_json::from_value(
        c.meta
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Corrupt("checkpoint header has no model config".into()))?,
    )
    .map_err(|e| Error::Corrupt(format!("unreadable model config: {e}")))?;
    let mut model = build_model::<S>(&config)?;
    let param_names: Vec<_> = model.params().into_iter().map(|(n, _, _)| n).collect();
    for (name, t) in param_names.iter().zip(model.params_mut()) {
        let blob = c.get(name)?;
        if blob.shape != t.shape() {
            return Err(Error::Corrupt(format!(
                "blob `{name}` has shape {:?}, model expects {:?}",
                blob.shape,
                t.shape()
            )));
        }
        for (dst, src) in t.data_mut().iter_mut().zip(blob.data.to_f64()) {
            *dst = S::lit(src);
        }
    }
    let buffer_names: Vec<_> = model.buffers().into_iter().map(|(n, _)| n).collect();
    for (name, v) in buffer_names.iter().zip(model.buffers_mut()) {
        let blob = c.get(name)?;
        if blob.data.len() != v.len() {
            return Err(Error::Corrupt(format!(
                "blob `{name}` has {} values, model expects {}",
                blob.data.len(),
                v.len()
            )));
        }
        for (dst, src) in v.iter_mut().zip(blob.data.to_f64()) {
            *dst = S::lit(src);
        }
    }
    if !model.is_finite() {
        return Err(Error::Data("checkpoint contains non-finite values".into()));
    }
    Ok(model)
}

pub fn save<S: Scalar>(model: &Model<S>, path: &Path, extra: Value) -> Result<()> {
    to_container(model, extra)?.write(path, CHECKPOINT_MAGIC)
}

pub fn load<S: Scalar>(path: &Path) -> Result<Model<S>> {
    from_container(&Container::read(path, CHECKPOINT_MAGIC)?)
}

/// The `extra` metadata stored alongside a checkpoint.
pub fn load_extra(path: &Path) -> Result<Value> {
    let c = Container::read(path, CHECKPOINT_MAGIC)?;
    Ok(c.meta.get("extra").cloned().unwrap_or(Value::Null))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ReadoutMode;

    fn perturbed(config: &ModelConfig) -> Model<f64> {
        let mut m = build_model::<f64>(config).unwrap();
        for (i, b) in m.buffers_mut().into_iter().enumerate() {
            b.iter_mut().for_each(|x| *x += 0.1 + i as f64 * 1e-3);
        }
        for t in m.params_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = *x * 1.7 + 1.0 / 3.0);
        }
        m
    }

    #[test]
    fn bit_exact_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for mut config in [
            ModelConfig::feedforward(3, 4),
            ModelConfig::recurrent(2, 4, 3, ReadoutMode::TwoAvg),
            ModelConfig::recurrent(1, 4, 3, ReadoutMode::LateAvg).to_multipath(&[2]),
        ] {
            config.input_shape = (16, 16);
            let m = perturbed(&config);
            let path = dir.path().join("m.ck");
            save(&m, &path, json!({"seed": 3})).unwrap();
            let back = load::<f64>(&path).unwrap();
            assert_eq!(back, m);
            assert_eq!(load_extra(&path).unwrap(), json!({"seed": 3}));
        }
    }

    #[test]
    fn f32_models_round_trip() {
        let mut config = ModelConfig::feedforward(2, 3);
        config.input_shape = (14, 14);
        let m = perturbed(&config).cast::<f32>();
        let back = from_container::<f32>(&to_container(&m, Value::Null).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn missing_blob_is_reported() {
        let mut config = ModelConfig::feedforward(1, 2);
        config.input_shape = (12, 12);
        let mut c = to_container(&build_model::<f64>(&config).unwrap(), Value::Null).unwrap();
        c.blobs.retain(|b| b.name != "readout.bias");
        let err = from_container::<f64>(&c).unwrap_err();
        assert!(err.to_string().contains("readout.bias"), "{err}");
    }
}
