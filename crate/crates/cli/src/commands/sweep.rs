//! `sweep`: the recurrent grid, its parameter-matched feedforward twins and optional
//! multi-path twins.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use itertools::iproduct;
use serde_json::{json, Value};
use sysid_core::model::BnActOrder;
use sysid_core::training::TrainSchedule;
use sysid_core::{build_model, Activation, LossKind, ModelKind};

use super::jobs::{job_result, run_jobs, Job};
use super::{dataset_path, load_dataset};
use crate::config::{ExperimentConfig, Grid, ModelSpec};
use crate::fail::{config_err, Result};
use crate::output::{ensure_dir, num, row, write_csv, write_json, Stamp};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Image size used to validate architectures before a dataset is known.
pub(crate) const PLACEHOLDER_INPUT: (usize, usize) = (64, 64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    Recurrent,
    Feedforward,
    Multipath,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Recurrent => "recurrent",
            Role::Feedforward => "feedforward",
            Role::Multipath => "multipath",
        }
    }
}

fn act_name(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Softplus => "softplus",
    }
}

fn order_name(o: BnActOrder) -> &'static str {
    match o {
        BnActOrder::BnBeforeAct => "bn_act",
        BnActOrder::BnAfterAct => "act_bn",
    }
}

fn loss_name(l: LossKind) -> &'static str {
    match l {
        LossKind::Mse => "mse",
        LossKind::Poisson => "poisson",
    }
}

/// Run label encoding every grid coordinate.
pub fn label(spec: &ModelSpec, loss: LossKind, seed: u64, fraction: f64) -> String {
    let arch = match spec.kind {
        ModelKind::Feedforward => format!("ff-c{}-b{}", spec.channels, spec.blocks),
        kind => format!(
            "{}-c{}-m{}-t{}-{}",
            if kind == ModelKind::Recurrent { "rec" } else { "mp" },
            spec.channels,
            spec.recurrent_layers,
            spec.iterations,
            spec.readout_mode.name()
        ),
    };
    let removed = if spec.removed_lengths.is_empty() {
        String::new()
    } else {
        let r: Vec<_> = spec.removed_lengths.iter().map(|l| l.to_string()).collect();
        format!("-x{}", r.join("_"))
    };
    format!(
        "{arch}{removed}-{}-{}-{}-s{seed}-f{fraction}",
        act_name(spec.activation),
        order_name(spec.bn_act_order),
        loss_name(loss)
    )
}

fn or<T: Clone>(values: &[T], fallback: T) -> Vec<T> {
    if values.is_empty() {
        vec![fallback]
    } else {
        values.to_vec()
    }
}

/// A job's configuration: the sweep configuration with one grid point fixed.
pub fn job_config(base: &ExperimentConfig, spec: ModelSpec, loss: LossKind, seed: u64, fraction: f64) -> ExperimentConfig {
    ExperimentConfig {
        model: spec,
        schedule: TrainSchedule {
            loss,
            ..base.schedule.clone()
        },
        seed,
        train_fraction: fraction,
        grid: Grid::default(),
        label: None,
        twins: BTreeMap::new(),
        ..base.clone()
    }
}

/// Expands the grid. Every recurrent run names its feedforward twin (shared between
/// recurrent runs that differ only in iterations or readout) and, when requested, its
/// multi-path twin.
pub fn expand(config: &ExperimentConfig) -> Result<Vec<(Role, Job)>> {
    let g = &config.grid;
    let m = &config.model;
    if m.kind == ModelKind::Feedforward {
        return Err(config_err("sweep expects a recurrent base model"));
    }
    let mut runs = Vec::new();
    let mut seen = BTreeSet::new();
    let points = iproduct!(
        or(&g.channels, m.channels),
        or(&g.recurrent_layers, m.recurrent_layers),
        or(&g.iterations, m.iterations),
        or(&g.readout_modes, m.readout_mode),
        or(&g.activations, m.activation),
        or(&g.bn_act_orders, m.bn_act_order),
        or(&g.losses, config.schedule.loss),
        or(&g.seeds, config.seed),
        or(&g.train_fractions, config.train_fraction)
    );
    for (channels, layers, iterations, mode, activation, order, loss, seed, fraction) in points {
        let rec = ModelSpec {
            kind: ModelKind::Recurrent,
            channels,
            recurrent_layers: layers,
            iterations,
            readout_mode: mode,
            activation,
            bn_act_order: order,
            removed_lengths: Vec::new(),
            ..m.clone()
        };
        let rec_label = label(&rec, loss, seed, fraction);
        let ff = ModelSpec::from_config(&rec.resolve(1, PLACEHOLDER_INPUT, seed)?.matched_feedforward());
        let mut twins = BTreeMap::new();
        let ff_label = label(&ff, loss, seed, fraction);
        twins.insert("feedforward".to_string(), ff_label.clone());
        if seen.insert(ff_label.clone()) {
            let cfg = job_config(config, ff, loss, seed, fraction);
            runs.push((Role::Feedforward, Job::new(ff_label, cfg)));
        }
        if g.multipath_twins {
            let mp = ModelSpec {
                kind: ModelKind::Multipath,
                ..rec.clone()
            };
            let mp_label = label(&mp, loss, seed, fraction);
            twins.insert("multipath".to_string(), mp_label.clone());
            if seen.insert(mp_label.clone()) {
                let mut cfg = job_config(config, mp, loss, seed, fraction);
                cfg.twins.insert("recurrent".into(), rec_label.clone());
                runs.push((Role::Multipath, Job::new(mp_label, cfg)));
            }
        }
        if seen.insert(rec_label.clone()) {
            let mut cfg = job_config(config, rec, loss, seed, fraction);
            cfg.twins = twins;
            runs.push((Role::Recurrent, Job::new(rec_label, cfg)));
        }
    }
    runs.sort_by(|a, b| (a.0, &a.1.label).cmp(&(b.0, &b.1.label)));
    Ok(runs)
}

pub fn sweep(config: &ExperimentConfig, out: &Path, parallel: usize) -> Result<()> {
    dataset_path(config)?;
    let (ds, digest) = load_dataset::<f64>(config)?;
    let runs = expand(config)?;
    ensure_dir(out)?;
    let stamp = Stamp {
        config_hash: config.hash(Some(&digest)),
        seed: None,
    };

    let conv_params = |job: &Job| -> Result<usize> {
        let c = job.config.model.resolve(ds.num_neurons(), ds.image_shape(), job.config.seed)?;
        Ok(build_model::<f64>(&c)?.param_count().conv)
    };
    let mut entries = Vec::new();
    let mut pairs = Vec::new();
    let by_label: BTreeMap<_, _> = runs.iter().map(|(_, j)| (j.label.clone(), j)).collect();
    for (role, job) in &runs {
        entries.push(json!({
            "label": job.label,
            "role": role.name(),
            "dir": job.dir,
            "seed": job.config.seed,
            "train_fraction": job.config.train_fraction,
            "conv_params": conv_params(job)?,
            "twins": job.config.twins,
        }));
        if *role == Role::Recurrent {
            let ff = by_label[&job.config.twins["feedforward"]];
            let (r, f) = (conv_params(job)?, conv_params(ff)?);
            pairs.push(json!({
                "recurrent": job.label,
                "feedforward": ff.label,
                "conv_params": [r, f],
                "matched": r == f,
            }));
        }
    }
    write_json(
        &out.join(MANIFEST_FILE),
        &stamp,
        json!({"dataset_digest": digest, "runs": entries, "pairs": pairs}),
    )?;

    let jobs: Vec<Job> = runs.iter().map(|(_, j)| j.clone()).collect();
    run_jobs(&jobs, out, &digest, parallel)?;

    let mut table = String::from("label,role,seed,train_fraction,score,average_length\n");
    for (role, job) in &runs {
        let r = job_result(out, job)?;
        table += &row([
            job.label.clone(),
            role.name().into(),
            job.config.seed.to_string(),
            job.config.train_fraction.to_string(),
            num(r["score"].as_f64().unwrap_or(f64::NAN)),
            r["ensemble"]["average_length"].as_f64().map(num).unwrap_or_default(),
        ]);
    }
    write_csv(&out.join("results.csv"), &stamp, &table)?;
    println!("{} runs finished ({} recurrent)", runs.len(), pairs.len());
    Ok(())
}

/// Labels of a result's twins, empty when none were recorded.
pub fn twins_of(result: &Value) -> BTreeMap<String, String> {
    serde_json::from_value(result["twins"].clone()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use sysid_core::ReadoutMode;

    fn grid_config() -> ExperimentConfig {
        ExperimentConfig {
            grid: Grid {
                iterations: vec![2, 3],
                readout_modes: vec![ReadoutMode::NoAvg, ReadoutMode::TwoAvg],
                seeds: vec![0, 1],
                train_fractions: vec![0.5, 1.0],
                multipath_twins: true,
                ..Grid::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn every_recurrent_run_has_exactly_one_matched_twin() {
        let runs = expand(&grid_config()).unwrap();
        let count = |r: Role| runs.iter().filter(|(role, _)| *role == r).count();
        assert_eq!(count(Role::Recurrent), 16);
        assert_eq!(count(Role::Multipath), 16);
        // Twins are shared across iterations and readout modes.
        assert_eq!(count(Role::Feedforward), 4);
        let labels: BTreeSet<_> = runs.iter().map(|(_, j)| j.label.clone()).collect();
        assert_eq!(labels.len(), runs.len());
        for (role, job) in &runs {
            if *role == Role::Recurrent {
                let ff = &job.config.twins["feedforward"];
                let matches: Vec<_> = runs.iter().filter(|(_, j)| &j.label == ff).collect();
                assert_eq!(matches.len(), 1);
                let twin = &matches[0].1.config;
                assert_eq!(twin.model.kind, ModelKind::Feedforward);
                assert_eq!((twin.seed, twin.train_fraction), (job.config.seed, job.config.train_fraction));
                let r = job.config.model.resolve(12, (32, 32), 0).unwrap();
                let f = twin.model.resolve(12, (32, 32), 0).unwrap();
                assert_eq!(
                    build_model::<f64>(&r).unwrap().param_count().conv,
                    build_model::<f64>(&f).unwrap().param_count().conv
                );
            }
        }
    }

    #[test]
    fn expansion_is_deterministic() {
        let a: Vec<_> = expand(&grid_config()).unwrap().into_iter().map(|(_, j)| j.label).collect();
        let b: Vec<_> = expand(&grid_config()).unwrap().into_iter().map(|(_, j)| j.label).collect();
        assert_eq!(a, b);
        assert_eq!(a[0], "rec-c8-m1-t2-no_avg-softplus-bn_act-poisson-s0-f0.5");
    }
}
