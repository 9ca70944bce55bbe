//! `multipath`: path ensemble of a trained checkpoint.

use std::path::Path;

use serde_json::Value;
use sysid_core::checkpoint;
use sysid_core::multipath::ensemble_summary;

use crate::config::{file_digest, sha256_hex};
use crate::fail::Result;
use crate::output::{ensure_dir, num, row, write_csv, write_json, Stamp};

pub fn multipath(checkpoint_path: &Path, out: &Path) -> Result<()> {
    let model = checkpoint::load::<f64>(checkpoint_path)?;
    let summary = ensemble_summary(&model)?;
    let stamp = Stamp {
        config_hash: sha256_hex(format!("multipath:{}", file_digest(checkpoint_path)?).as_bytes()),
        seed: Some(model.config.seed),
    };
    ensure_dir(out)?;
    let mut report = summary.to_json();
    if let Value::Object(map) = &mut report {
        map.insert("model".into(), serde_json::to_value(&model.config)?);
    }
    write_json(&out.join("ensemble.json"), &stamp, report)?;
    let mut table = String::from("path,length,layers,iterations,raw_strength,strength\n");
    for (i, p) in summary.paths.iter().enumerate() {
        let join = |f: &dyn Fn(&sysid_core::multipath::Component) -> usize| {
            p.components.iter().map(|c| f(c).to_string()).collect::<Vec<_>>().join(" ")
        };
        table += &row([
            i.to_string(),
            p.length.to_string(),
            join(&|c| c.layer),
            join(&|c| c.iteration),
            num(summary.raw_strengths[i]),
            num(summary.strengths[i]),
        ]);
    }
    write_csv(&out.join("paths.csv"), &stamp, &table)?;
    let mut dist = String::from("length,mass\n");
    for (l, m) in &summary.diversity {
        dist += &row([l.to_string(), num(*m)]);
    }
    write_csv(&out.join("diversity.csv"), &stamp, &dist)?;
    println!(
        "{} paths, average length {:.4}",
        summary.paths.len(),
        summary.average_length
    );
    Ok(())
}
