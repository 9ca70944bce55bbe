//! `gen-data`: a teacher dataset with its generating model.

use std::path::Path;

use serde_json::json;
use sysid_core::checkpoint;
use sysid_core::data::generate_teacher_dataset;
use sysid_core::metrics::score_predictions;
use sysid_core::Tensor;

use crate::config::{file_digest, ExperimentConfig};
use crate::fail::Result;
use crate::output::{ensure_dir, write_csv, write_json, Stamp};

pub const DATASET_FILE: &str = "dataset.sysid";
pub const TEACHER_FILE: &str = "teacher.ck";

pub fn gen_data(config: &ExperimentConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let stamp = Stamp {
        config_hash: config.hash(None),
        seed: Some(config.seed),
    };
    let (ds, teacher, rates) = generate_teacher_dataset(&config.teacher, config.seed)?;
    let meta = json!({"config_hash": stamp.config_hash, "seed": config.seed, "teacher": config.teacher});
    ds.save(&out.join(DATASET_FILE), meta.clone())?;
    checkpoint::save(&teacher, &out.join(TEACHER_FILE), meta)?;

    // The teacher's own noise-free rates scored against the noisy trials.
    let all: Vec<usize> = (0..ds.num_stimuli()).collect();
    let test_rates = Tensor::from_vec(
        &[ds.split.test.len(), ds.num_neurons()],
        ds.split
            .test
            .iter()
            .flat_map(|&i| (0..ds.num_neurons()).map(move |j| (i, j)))
            .map(|(i, j)| rates.at(&[i, j]))
            .collect(),
    )?;
    let on_test = score_predictions(&test_rates, &ds, &ds.split.test)?;
    let on_all = score_predictions(&rates, &ds, &all)?;
    write_csv(&out.join("teacher_scores.csv"), &stamp, &on_all.to_csv())?;
    write_json(
        &out.join("summary.json"),
        &stamp,
        json!({
            "stimuli": ds.num_stimuli(),
            "neurons": ds.num_neurons(),
            "trials": ds.num_trials(),
            "image_shape": ds.image_shape(),
            "split_sizes": [ds.split.train.len(), ds.split.val.len(), ds.split.test.len()],
            "dataset_digest": file_digest(&out.join(DATASET_FILE))?,
            "teacher_score_test": on_test.mean_cc_norm2,
            "teacher_score_all": on_all.mean_cc_norm2,
        }),
    )?;
    println!(
        "wrote {} stimuli x {} neurons x {} trials; teacher CC_norm2 {:.4}",
        ds.num_stimuli(),
        ds.num_neurons(),
        ds.num_trials(),
        on_all.mean_cc_norm2
    );
    Ok(())
}
