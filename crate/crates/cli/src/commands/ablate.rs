//! `ablate`: retrain multi-path models with windows of adjacent path lengths removed.

use std::path::Path;

use sysid_core::multipath::{length_range, length_windows};
use sysid_core::ModelKind;

use super::jobs::{job_result, run_jobs, Job};
use super::load_dataset;
use super::sweep::{label, PLACEHOLDER_INPUT};
use crate::config::{ExperimentConfig, ModelSpec};
use crate::fail::{config_err, Result};
use crate::output::{ensure_dir, num, row, write_csv, Stamp};

/// One row of the ablation table.
#[derive(Clone, Debug)]
pub struct Variant {
    /// `baseline`, `only-<L>`, `feedforward`, or the removed window such as `1-3`.
    pub name: String,
    pub removed: Vec<usize>,
    pub job: Job,
}

pub fn variants(config: &ExperimentConfig, width: usize) -> Result<Vec<Variant>> {
    let m = &config.model;
    if m.kind == ModelKind::Feedforward {
        return Err(config_err("ablation needs a recurrent or multi-path base model"));
    }
    if width == 0 {
        return Err(config_err("window width must be positive"));
    }
    let all: Vec<usize> = length_range(m.recurrent_layers, m.iterations).collect();
    let loss = config.schedule.loss;
    let variant = |name: String, spec: ModelSpec| {
        let removed = spec.removed_lengths.clone();
        let job_label = label(&spec, loss, config.seed, config.train_fraction);
        Variant {
            name,
            removed,
            job: Job::new(
                job_label,
                ExperimentConfig {
                    model: spec,
                    grid: Default::default(),
                    ..config.clone()
                },
            ),
        }
    };
    let multipath = |removed: Vec<usize>| ModelSpec {
        kind: ModelKind::Multipath,
        removed_lengths: removed,
        ..m.clone()
    };
    let mut out = vec![variant("baseline".into(), multipath(Vec::new()))];
    for w in length_windows(m.recurrent_layers, m.iterations, width) {
        if w.len() < all.len() {
            out.push(variant(format!("{}-{}", w[0], w[w.len() - 1]), multipath(w)));
        }
    }
    if all.len() > 1 {
        out.push(variant(format!("only-{}", all[0]), multipath(all[1..].to_vec())));
    }
    let chain = ModelSpec::from_config(&m.resolve(1, PLACEHOLDER_INPUT, config.seed)?.chain_equivalent());
    out.push(variant("feedforward".into(), chain));
    Ok(out)
}

pub fn ablate(config: &ExperimentConfig, width: usize, out: &Path, parallel: usize) -> Result<()> {
    let (_, digest) = load_dataset::<f64>(config)?;
    let variants = variants(config, width)?;
    ensure_dir(out)?;
    let jobs: Vec<Job> = variants.iter().map(|v| v.job.clone()).collect();
    run_jobs(&jobs, out, &digest, parallel)?;

    let scores = variants
        .iter()
        .map(|v| Ok(job_result(out, &v.job)?["score"].as_f64().unwrap_or(f64::NAN)))
        .collect::<Result<Vec<_>>>()?;
    let baseline = scores[0];
    let mut table = String::from("window,removed_lengths,label,score,delta\n");
    for (v, s) in variants.iter().zip(&scores) {
        let removed: Vec<_> = v.removed.iter().map(|l| l.to_string()).collect();
        table += &row([
            v.name.clone(),
            removed.join(" "),
            v.job.label.clone(),
            num(*s),
            num(s - baseline),
        ]);
    }
    let stamp = Stamp {
        config_hash: config.hash(Some(&digest)),
        seed: Some(config.seed),
    };
    write_csv(&out.join("ablation.csv"), &stamp, &table)?;
    println!("baseline CC_norm2 {baseline:.4}; {} ablations", variants.len() - 1);
    Ok(())
}
