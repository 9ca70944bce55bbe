//! `neurophys`: receptive-field mapping, length and size tuning and temporal dynamics
//! of a checkpoint or of the built-in suppressive circuit.

use std::path::Path;

use serde_json::json;
use sysid_core::container::{BlobData, Container, PROBE_MAGIC};
use sysid_core::neurophys::{
    map_receptive_fields, shipped_circuit, size_tuning, length_tuning, temporal_dynamics, ProbeSettings, Tuning,
};
use sysid_core::{checkpoint, Model};

use crate::config::{file_digest, sha256_hex, ExperimentConfig};
use crate::fail::Result;
use crate::output::{ensure_dir, num, row, write_csv, write_json, Stamp};

pub const PROBE_FILE: &str = "probe.sysid";

pub fn neurophys(config: &ExperimentConfig, checkpoint_path: Option<&Path>, out: &Path) -> Result<()> {
    let (model, source): (Model<f64>, String) = match checkpoint_path {
        Some(p) => (checkpoint::load(p)?, file_digest(p)?),
        None => (shipped_circuit(), "built-in circuit".into()),
    };
    let settings = ProbeSettings {
        block: config.probe.block,
        image_size: config.probe.image_size,
    };
    let stamp = Stamp {
        config_hash: sha256_hex(format!("neurophys:{source}:{}:{}", settings.block, settings.image_size).as_bytes()),
        seed: Some(model.config.seed),
    };
    ensure_dir(out)?;

    let fields = map_receptive_fields(&model, &settings)?;
    let mut rf_table = String::from("unit,dx,dy,orientation,response,mappable\n");
    for rf in &fields {
        rf_table += &row([
            rf.unit.to_string(),
            num(rf.offset.0),
            num(rf.offset.1),
            num(rf.orientation),
            num(rf.response),
            rf.mappable.to_string(),
        ]);
    }
    write_csv(&out.join("receptive_fields.csv"), &stamp, &rf_table)?;

    let length = length_tuning(&model, &settings, &fields)?;
    let size = size_tuning(&model, &settings, &fields)?;
    let dynamics = temporal_dynamics(&model, &settings)?;
    for (name, tuning) in [("length", &length), ("size", &size)] {
        write_csv(&out.join(format!("{name}_tuning_first.csv")), &stamp, &tuning.first.to_csv())?;
        write_csv(&out.join(format!("{name}_tuning_last.csv")), &stamp, &tuning.last.to_csv())?;
    }
    let mut temporal = String::from("iteration,mean\n");
    for (t, m) in dynamics.mean.iter().enumerate() {
        temporal += &row([(t + 1).to_string(), num(*m)]);
    }
    write_csv(&out.join("temporal.csv"), &stamp, &temporal)?;

    let (length_first, length_last) = length.suppression()?;
    let (size_first, size_last) = size.suppression()?;
    write_json(
        &out.join("summary.json"),
        &stamp,
        json!({
            "iterations": model.config.iterations,
            "probe": settings,
            "mappable_units": fields.iter().filter(|f| f.mappable).count(),
            "length_units": length.units,
            "size_units": size.units,
            "length_si": {"first": length_first, "last": length_last},
            "size_si": {"first": size_first, "last": size_last},
            "temporal": dynamics,
            "curves": {
                "length": {"first": length.first, "last": length.last},
                "size": {"first": size.first, "last": size.last},
            },
        }),
    )?;

    let mut dump = Container::new(json!({"config_hash": stamp.config_hash, "fields": fields}));
    push_sweeps(&mut dump, "length", &length)?;
    push_sweeps(&mut dump, "size", &size)?;
    dump.write(&out.join(PROBE_FILE), PROBE_MAGIC)?;

    println!(
        "size SI first {size_first:.3} last {size_last:.3}; length SI first {length_first:.3} last {length_last:.3}"
    );
    Ok(())
}

/// Raw `[t][value]` responses of each kept unit as blobs `<name>.u<unit>`.
fn push_sweeps(dump: &mut Container, name: &str, tuning: &Tuning) -> Result<()> {
    for (unit, r) in tuning.units.iter().zip(&tuning.responses) {
        let shape = [r.len(), r.first().map_or(0, Vec::len)];
        dump.push(
            format!("{name}.u{unit}"),
            &shape,
            BlobData::F64(r.iter().flatten().copied().collect()),
        )?;
    }
    Ok(())
}
