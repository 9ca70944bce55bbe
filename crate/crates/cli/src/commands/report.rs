//! `report`: aggregate tables over every finished run below a results directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use sysid_core::metrics::{cc_raw, sample_var};
use walkdir::WalkDir;

use super::train::RESULT_FILE;
use crate::config::sha256_hex;
use crate::fail::{data_err, Result};
use crate::output::{ensure_dir, num, read_json, row, write_csv, write_json, Stamp};

/// One finished training run.
#[derive(Clone, Debug)]
pub struct Run {
    pub label: String,
    pub kind: String,
    pub channels: u64,
    pub recurrent_layers: u64,
    pub iterations: u64,
    pub readout_mode: String,
    pub seed: u64,
    pub train_fraction: f64,
    pub score: f64,
    pub average_length: Option<f64>,
    pub diversity: BTreeMap<String, f64>,
    pub twins: BTreeMap<String, String>,
    pub config_hash: String,
}

impl Run {
    fn from_json(v: &Value, fallback_label: String) -> Option<Run> {
        let m = &v["model"];
        Some(Run {
            label: v["label"].as_str().map(str::to_string).unwrap_or(fallback_label),
            kind: v["kind"].as_str()?.to_string(),
            channels: m["channels"].as_u64()?,
            recurrent_layers: m["recurrent_layers"].as_u64()?,
            iterations: m["iterations"].as_u64()?,
            readout_mode: m["readout_mode"].as_str()?.to_string(),
            seed: v["seed"].as_u64()?,
            train_fraction: v["train_fraction"].as_f64()?,
            score: v["score"].as_f64()?,
            average_length: v["ensemble"]["average_length"].as_f64(),
            diversity: serde_json::from_value(v["ensemble"]["diversity"].clone()).unwrap_or_default(),
            twins: serde_json::from_value(v["twins"].clone()).unwrap_or_default(),
            config_hash: v["config_hash"].as_str()?.to_string(),
        })
    }
}

/// Files named `name` anywhere below `root`, in sorted order.
fn find_files(root: &Path, name: &str) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| data_err(format!("cannot list {}: {e}", root.display())))?;
        if entry.file_type().is_file() && entry.file_name() == name {
            found.push(entry.into_path());
        }
    }
    Ok(found)
}

pub fn collect_runs(root: &Path) -> Result<Vec<Run>> {
    let mut runs = Vec::new();
    for path in find_files(root, RESULT_FILE)? {
        let v = read_json(&path)?;
        let fallback = path
            .parent()
            .and_then(|p| p.strip_prefix(root).ok())
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        let run = Run::from_json(&v, fallback).ok_or_else(|| data_err(format!("{} is not a training result", path.display())))?;
        runs.push(run);
    }
    runs.sort_by(|a, b| a.label.cmp(&b.label));
    runs.dedup_by(|a, b| a.label == b.label && a.config_hash == b.config_hash);
    Ok(runs)
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let se = if xs.len() > 1 { (sample_var(xs) / n).sqrt() } else { 0.0 };
    (mean, se)
}

fn correlation(pairs: &[(f64, f64)]) -> Value {
    let (a, b): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    json!({"r": cc_raw(&a, &b), "n": pairs.len()})
}

pub fn report(results: &Path, out: &Path, plot_data: bool) -> Result<Value> {
    if !results.is_dir() {
        return Err(data_err(format!("{} is not a directory", results.display())));
    }
    let runs = collect_runs(results)?;
    if runs.is_empty() {
        return Err(data_err(format!("no training results below {}", results.display())));
    }
    let stamp = Stamp {
        config_hash: sha256_hex(
            runs.iter()
                .map(|r| format!("{}:{}\n", r.label, r.config_hash))
                .collect::<String>()
                .as_bytes(),
        ),
        seed: None,
    };
    ensure_dir(out)?;
    let by_label: BTreeMap<&str, &Run> = runs.iter().map(|r| (r.label.as_str(), r)).collect();
    let twin = |r: &Run, role: &str| r.twins.get(role).and_then(|l| by_label.get(l.as_str())).copied();

    // Recurrent vs matched feedforward.
    let mut improvement = String::from(
        "recurrent,feedforward,channels,recurrent_layers,iterations,readout_mode,seed,train_fraction,recurrent_score,feedforward_score,improvement\n",
    );
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut scatter = Vec::new();
    for r in runs.iter().filter(|r| r.kind == "recurrent") {
        let Some(f) = twin(r, "feedforward") else { continue };
        let gain = (r.score - f.score) / f.score;
        improvement += &row([
            r.label.clone(),
            f.label.clone(),
            r.channels.to_string(),
            r.recurrent_layers.to_string(),
            r.iterations.to_string(),
            r.readout_mode.clone(),
            r.seed.to_string(),
            r.train_fraction.to_string(),
            num(r.score),
            num(f.score),
            num(gain),
        ]);
        let fraction = r.train_fraction.to_string();
        groups.entry((fraction.clone(), r.iterations.to_string())).or_default().push(gain);
        groups.entry((fraction, "all".into())).or_default().push(gain);
        scatter.push((f.score, r.score, r.train_fraction, r.iterations));
    }
    write_csv(&out.join("improvement.csv"), &stamp, &improvement)?;
    let mut summary = String::from("train_fraction,iterations,mean_improvement,se,n\n");
    let mut summary_json = Vec::new();
    for ((fraction, iterations), gains) in &groups {
        let (m, se) = mean_se(gains);
        summary += &row([fraction.clone(), iterations.clone(), num(m), num(se), gains.len().to_string()]);
        summary_json.push(json!({"train_fraction": fraction, "iterations": iterations, "mean": m, "se": se, "n": gains.len()}));
    }
    write_csv(&out.join("improvement_summary.csv"), &stamp, &summary)?;

    // Score against average path length.
    let mut lengths = String::from("label,kind,iterations,readout_mode,seed,train_fraction,score,average_length\n");
    for r in runs.iter().filter(|r| r.average_length.is_some()) {
        lengths += &row([
            r.label.clone(),
            r.kind.clone(),
            r.iterations.to_string(),
            r.readout_mode.clone(),
            r.seed.to_string(),
            r.train_fraction.to_string(),
            num(r.score),
            num(r.average_length.unwrap_or(f64::NAN)),
        ]);
    }
    write_csv(&out.join("path_length.csv"), &stamp, &lengths)?;

    let mut score_pairs = Vec::new();
    let mut length_pairs = Vec::new();
    for r in runs.iter().filter(|r| r.kind == "recurrent") {
        if let Some(p) = twin(r, "multipath") {
            score_pairs.push((r.score, p.score));
            if let (Some(a), Some(b)) = (r.average_length, p.average_length) {
                length_pairs.push((a, b));
            }
        }
    }
    let score_length: Vec<_> = runs
        .iter()
        .filter(|r| r.kind == "recurrent")
        .filter_map(|r| r.average_length.map(|l| (l, r.score)))
        .collect();
    let correlations = json!({
        "multipath_vs_recurrent_score": correlation(&score_pairs),
        "multipath_vs_recurrent_average_length": correlation(&length_pairs),
        "recurrent_score_vs_average_length": correlation(&score_length),
    });
    let report = json!({
        "runs": runs.len(),
        "improvement": summary_json,
        "correlations": correlations,
    });
    write_json(&out.join("report.json"), &stamp, report.clone())?;

    if plot_data {
        write_plot_data(results, &out.join("plots"), &stamp, &runs, &scatter)?;
    }
    println!("{} runs, {} recurrent/feedforward pairs", runs.len(), scatter.len());
    Ok(report)
}

fn write_plot_data(
    results: &Path,
    dir: &Path,
    stamp: &Stamp,
    runs: &[Run],
    scatter: &[(f64, f64, f64, u64)],
) -> Result<()> {
    ensure_dir(dir)?;
    let mut fig3 = String::from("feedforward_score,recurrent_score,train_fraction,iterations\n");
    for (f, r, frac, t) in scatter {
        fig3 += &row([num(*f), num(*r), frac.to_string(), t.to_string()]);
    }
    write_csv(&dir.join("fig3_scatter.csv"), stamp, &fig3)?;

    let mut fig5 = String::from("label,kind,length,mass\n");
    for r in runs {
        for (l, m) in &r.diversity {
            fig5 += &row([r.label.clone(), r.kind.clone(), l.clone(), num(*m)]);
        }
    }
    write_csv(&dir.join("fig5_diversity.csv"), stamp, &fig5)?;

    let mut fig6 = String::from("source,curve,iteration,parameter,mean,se\n");
    for path in find_files(results, "summary.json")? {
        let v = read_json(&path)?;
        let Some(curves) = v["curves"].as_object() else { continue };
        let source = path
            .parent()
            .and_then(|p| p.strip_prefix(results).ok())
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        for (curve, by_t) in curves {
            for t in ["first", "last"] {
                let c = &by_t[t];
                let params = c["parameter"].as_array().cloned().unwrap_or_default();
                for (i, p) in params.iter().enumerate() {
                    fig6 += &row([
                        source.clone(),
                        curve.clone(),
                        t.into(),
                        num(p.as_f64().unwrap_or(f64::NAN)),
                        num(c["mean"][i].as_f64().unwrap_or(f64::NAN)),
                        num(c["se"][i].as_f64().unwrap_or(f64::NAN)),
                    ]);
                }
            }
        }
    }
    write_csv(&dir.join("fig6_curves.csv"), stamp, &fig6)?;
    Ok(())
}
