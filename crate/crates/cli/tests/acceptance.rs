//! End-to-end acceptance checks. Every test prints one `PASS`/`FAIL` line.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sysid_core::data::{generate_teacher_dataset, LateralTemplate, TeacherSpec};
use sysid_core::metrics::{cc_max, score_predictions, TrialMatrix};
use sysid_core::multipath::{enumerate_paths, ensemble_summary, readout_weight};
use sysid_core::neurophys::{
    self, map_receptive_fields, render_bar, render_grating, shipped_circuit, size_tuning, length_tuning,
    suppressive_circuit, temporal_dynamics, BarStimulus, GratingStimulus, ProbeSettings, CIRCUIT_ITERATIONS,
};
use sysid_core::training::{objective_gradient_check, Regularization};
use sysid_core::{build_model, Activation, LossKind, ModelConfig, ReadoutMode, Tensor};

/// Writes straight to stdout so the line survives the test harness's output capture.
fn verdict(name: &str, ok: bool, detail: String) {
    let line = format!("{} {name}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    std::io::stdout().lock().write_all(line.as_bytes()).unwrap();
    assert!(ok, "{name}: {detail}");
}

// ---------------------------------------------------------------- library criteria

#[test]
fn c1_gradient_correctness() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let images = Tensor::uniform(&[2, 11, 11], 0.5, &mut rng).map(|v| v + 0.5);
    let targets = Tensor::uniform(&[2, 2], 0.5, &mut rng).map(|v| v + 1.0);
    let reg = Regularization {
        readout_l1: 1e-2,
        conv_l1: 1e-2,
        smoothness: 1e-2,
    };
    let mut configs = Vec::new();
    for act in [Activation::Softplus, Activation::Relu] {
        configs.push(ModelConfig {
            activation: act,
            ..ModelConfig::feedforward(3, 2)
        });
        for m_rec in [1, 2] {
            for t in 1..=3 {
                for mode in ReadoutMode::ALL {
                    let rec = ModelConfig {
                        activation: act,
                        ..ModelConfig::recurrent(m_rec, 2, t, mode)
                    };
                    configs.push(rec.to_multipath(&[]));
                    configs.push(rec);
                }
            }
        }
    }
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for base in configs {
        let config = ModelConfig {
            first_kernel: 5,
            input_shape: (11, 11),
            num_neurons: 2,
            seed: 5,
            ..base
        };
        let model = build_model::<f64>(&config).unwrap();
        for loss in [LossKind::Mse, LossKind::Poisson] {
            let err = objective_gradient_check(&model, &images, &targets, loss, &reg).unwrap();
            checked += 1;
            if err > worst.0 {
                worst = (
                    err,
                    format!(
                        "{:?} m_rec={} T={} {:?} {:?} {:?}",
                        config.kind,
                        config.recurrent_layers(),
                        config.iterations,
                        config.readout_mode,
                        config.activation,
                        loss
                    ),
                );
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "criterion 1 (gradient correctness)",
        worst.0 < 1e-4 && secs < 120.0,
        format!("{checked} configurations, max relative error {:.2e} ({}), {secs:.0} s", worst.0, worst.1),
    );
}

#[test]
fn c2_feedforward_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let images = Tensor::uniform(&[100, 20, 20], 0.5, &mut rng).map(|v| v + 0.5);
    let mut compared = 0;
    let mut all_equal = true;
    for act in [Activation::Softplus, Activation::Relu] {
        for m_rec in [1, 2] {
            for mode in ReadoutMode::ALL {
                let config = ModelConfig {
                    activation: act,
                    input_shape: (20, 20),
                    seed: 9,
                    ..ModelConfig::recurrent(m_rec, 3, 1, mode)
                };
                let rec = build_model::<f64>(&config).unwrap();
                let chain = rec.chain_equivalent().unwrap().predict(&images).unwrap();
                let multi = rec.to_multipath(&[]).unwrap().predict(&images).unwrap();
                let direct = rec.predict(&images).unwrap();
                let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                all_equal &= bits(&direct) == bits(&chain) && bits(&multi) == bits(&chain);
                compared += 2;
            }
        }
    }
    verdict(
        "criterion 2 (feedforward equivalence at T=1)",
        all_equal,
        format!("{compared} model pairs bitwise identical on 100 inputs: {all_equal}"),
    );
}

/// Exhaustive walk of the unrolled DAG: enter layer 1 at some iteration through its
/// feedforward convolution, then repeatedly take a lateral step (same layer, next
/// iteration) or a feedforward step (next layer, same iteration) until `(M, t_end)`.
fn dag_paths(m_rec: usize, t_end: usize) -> Vec<usize> {
    fn walk(layer: usize, t: usize, len: usize, m_rec: usize, t_end: usize, out: &mut Vec<usize>) {
        if layer == m_rec && t == t_end {
            out.push(len);
        }
        if t < t_end {
            walk(layer, t + 1, len + 1, m_rec, t_end, out);
        }
        if layer < m_rec {
            walk(layer + 1, t, len + 1, m_rec, t_end, out);
        }
    }
    let mut out = Vec::new();
    for entry in 1..=t_end {
        walk(1, entry, 1, m_rec, t_end, &mut out);
    }
    out
}

#[test]
fn c3_path_combinatorics() {
    let mut mismatches = Vec::new();
    for m_rec in [1, 2] {
        for t in 1..=7 {
            for mode in ReadoutMode::ALL {
                let ends: Vec<usize> = if mode == ReadoutMode::NoAvg { vec![t] } else { (1..=t).collect() };
                let mut oracle: Vec<(usize, usize)> = ends
                    .iter()
                    .flat_map(|&e| dag_paths(m_rec, e).into_iter().map(move |l| (e, l)))
                    .collect();
                let mut found: Vec<(usize, usize)> = enumerate_paths(m_rec, t, mode)
                    .unwrap()
                    .iter()
                    .map(|p| (p.t_end(), p.length))
                    .collect();
                oracle.sort();
                found.sort();
                if oracle != found {
                    mismatches.push(format!("m_rec={m_rec} T={t} {mode:?}"));
                }
            }
        }
    }
    let example: BTreeMap<usize, usize> =
        enumerate_paths(2, 3, ReadoutMode::NoAvg)
            .unwrap()
            .iter()
            .fold(BTreeMap::new(), |mut m, p| {
                *m.entry(p.length).or_insert(0) += 1;
                m
            });
    let example_ok = example == BTreeMap::from([(2, 1), (3, 2), (4, 3)]);

    let mut worst_sum = 0.0f64;
    for m_rec in [1, 2] {
        for t in 1..=7 {
            for mode in ReadoutMode::ALL {
                let config = ModelConfig {
                    input_shape: (16, 16),
                    seed: t as u64,
                    ..ModelConfig::recurrent(m_rec, 3, t, mode)
                };
                let s = ensemble_summary(&build_model::<f64>(&config).unwrap()).unwrap();
                worst_sum = worst_sum.max((s.strengths.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    let w: Vec<f64> = (1..=3).map(|e| readout_weight(ReadoutMode::TwoAvg, 3, e)).collect();
    let weights_ok = w
        .iter()
        .zip([11.0 / 18.0, 5.0 / 18.0, 2.0 / 18.0])
        .all(|(a, b)| (a - b).abs() < 1e-12);
    verdict(
        "criterion 3 (path combinatorics)",
        mismatches.is_empty() && example_ok && worst_sum < 1e-9 && weights_ok,
        format!(
            "oracle mismatches {mismatches:?}; M=2,T=3 lengths {example:?}; max |sum s - 1| {worst_sum:.1e}; two_avg T=3 weights {w:?}"
        ),
    );
}

#[test]
fn c4_metric_identities() {
    let start = std::time::Instant::now();
    let identical = TrialMatrix::from_rows(&[vec![1.0, 1.0, 1.0], vec![3.0, 3.0, 3.0], vec![2.0, 2.0, 2.0]]).unwrap();
    let one = cc_max(&identical).0.unwrap();
    let worked = cc_max(&TrialMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0], vec![3.0, 4.0]]).unwrap())
        .0
        .unwrap();
    let worked_err = (worked - 3f64.sqrt() / 2.0).abs();

    let mut teacher_scores = Vec::new();
    for seed in 0..3 {
        let spec = TeacherSpec::desk_scale();
        let (ds, _, rates) = generate_teacher_dataset(&spec, seed).unwrap();
        let all: Vec<usize> = (0..ds.num_stimuli()).collect();
        teacher_scores.push(score_predictions(&rates, &ds, &all).unwrap().mean_cc_norm2);
    }
    let teacher_ok = teacher_scores.iter().all(|s| (s - 1.0).abs() <= 0.05);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "criterion 4 (metric identities)",
        one == 1.0 && worked_err < 1e-12 && teacher_ok && secs < 60.0,
        format!(
            "identical trials CC_max {one}; worked example error {worked_err:.1e}; teacher self-scores (K=8, S=2000, seeds 0-2) {teacher_scores:.4?}; {secs:.0} s"
        ),
    );
}

#[test]
fn c8_neurophysiology() {
    let start = std::time::Instant::now();
    let settings = ProbeSettings::default();
    let circuit = shipped_circuit();
    let fields = map_receptive_fields(&circuit, &settings).unwrap();
    let (size_first, size_last) = size_tuning(&circuit, &settings, &fields).unwrap().suppression().unwrap();
    let length = length_tuning(&circuit, &settings, &fields).unwrap();
    let (length_first, length_last) = length.suppression().unwrap();
    let curve = &length.last.mean;
    let peak = (0..curve.len()).fold(0, |b, i| if curve[i] > curve[b] { i } else { b });
    let rise_fall = peak > 0 && peak < curve.len() - 1 && curve[0] < curve[peak] && curve[curve.len() - 1] < curve[peak];

    let flat = suppressive_circuit(CIRCUIT_ITERATIONS, LateralTemplate::Zero);
    let dynamics = temporal_dynamics(&flat, &settings).unwrap().mean;
    let flat_ok = dynamics.iter().all(|m| (m - dynamics[0]).abs() <= 1e-12 * dynamics[0].abs().max(1.0));

    let size = neurophys::PROBE_SIZE;
    let mut range_ok = true;
    let mut turn_ok = true;
    for o in neurophys::orientations() {
        let bar = BarStimulus::new(o, 12.0, (3.0, -2.0));
        let a = render_bar(&bar, size);
        let b = render_bar(&BarStimulus { orientation: o + 180.0, ..bar }, size);
        turn_ok &= a == b;
        let g = GratingStimulus {
            diameter: Some(20.0),
            ..GratingStimulus::full_field(7.0, o, 1.0)
        };
        let ga = render_grating(&g, size);
        range_ok &= a.data().iter().chain(ga.data()).all(|v| (0.0..=1.0).contains(v));
    }
    let extreme = render_grating(&GratingStimulus::full_field(12.0, 0.0, std::f64::consts::FRAC_PI_4), size);
    let hi = extreme.data().iter().cloned().fold(f64::MIN, f64::max);
    let lo = extreme.data().iter().cloned().fold(f64::MAX, f64::min);
    let contrast_ok = hi == 0.5 * 1.3 && lo == 0.5 * 0.7;
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "criterion 8 (neurophysiology properties)",
        size_last > 0.25
            && size_first == 0.0
            && length_first == 0.0
            && rise_fall
            && flat_ok
            && range_ok
            && turn_ok
            && contrast_ok
            && secs < 300.0,
        format!(
            "size SI first {size_first:.3} last {size_last:.3}; length SI first {length_first:.3} last {length_last:.3}, last-iteration peak at index {peak} of {}; zero-lateral dynamics {dynamics:.4?}; pixel range {range_ok}, 180-degree identity {turn_ok}, contrast extrema ({hi}, {lo}); {secs:.0} s",
            curve.len()
        ),
    );
}

// ---------------------------------------------------------------- command-line criteria

fn sysid(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sysid"))
        .args(args)
        .env_remove("SYSID_OUT")
        .output()
        .expect("the sysid binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = sysid(args);
    assert!(
        out.status.success(),
        "sysid {args:?} failed with {:?}:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Teacher dataset from `gen-data`; `teacher` overrides fields of the desk-scale spec.
fn teacher_dataset(dir: &Path, teacher: Value) -> PathBuf {
    let cfg = write_config(dir, "data.json", &json!({"teacher": teacher, "seed": 0}));
    let out = dir.join("data");
    run_ok(&["gen-data", "--config", s(&cfg), "--out", s(&out)]);
    out.join("dataset.sysid")
}

/// Rows of a stamped CSV as column-name maps.
fn read_table(path: &Path) -> Vec<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<String> = lines.next().unwrap().split(',').map(str::to_string).collect();
    lines
        .map(|l| header.iter().cloned().zip(l.split(',').map(str::to_string)).collect())
        .collect()
}

fn field(row: &BTreeMap<String, String>, name: &str) -> f64 {
    row[name].parse().unwrap_or(f64::NAN)
}

/// Desk training schedule shared by the data-efficiency and ablation runs.
fn desk_schedule() -> Value {
    json!({
        "batch_size": 16,
        "phases": [
            {"learning_rate": 3e-3, "max_epochs": 30, "patience": 5},
            {"learning_rate": 1e-3, "max_epochs": 10, "patience": 3},
            {"learning_rate": 3e-4, "max_epochs": 5, "patience": 2},
        ],
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn c5_recurrent_data_efficiency() {
    let start = std::time::Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let ds = teacher_dataset(dir.path(), json!({}));
    let cfg = write_config(
        dir.path(),
        "sweep.json",
        &json!({
            "precision": "f32",
            "dataset": ds,
            "model": {"kind": "recurrent", "channels": 8, "recurrent_layers": 1, "readout_mode": "two_avg"},
            "schedule": desk_schedule(),
            "grid": {"iterations": [3, 5, 7], "seeds": [0, 1], "train_fractions": [0.25, 0.5, 1.0]},
        }),
    );
    let out = dir.path().join("sweep");
    run_ok(&["sweep", "--config", s(&cfg), "--out", s(&out), "--jobs", "4"]);
    run_ok(&["report", "--results", s(&out)]);
    let rows = read_table(&out.join("report/improvement.csv"));

    let mut cells: BTreeMap<(String, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &rows {
        let e = cells.entry((r["train_fraction"].clone(), r["iterations"].clone())).or_default();
        e.0.push(field(r, "recurrent_score"));
        e.1.push(field(r, "feedforward_score"));
    }
    let mut lines = Vec::new();
    let mut all_ge = cells.len() == 9;
    let mut gain_by_fraction: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for ((fraction, t), (rec, ff)) in &cells {
        let (r, f) = (mean(rec), mean(ff));
        all_ge &= r >= f;
        gain_by_fraction.entry(fraction.clone()).or_default().push((r - f) / f);
        lines.push(format!("f={fraction} T={t}: R {r:.4} F {f:.4}"));
    }
    let gains: BTreeMap<_, _> = gain_by_fraction.iter().map(|(k, v)| (k.clone(), mean(v))).collect();
    let quarter = gains.get("0.25").copied().unwrap_or(f64::NAN);
    let largest_at_quarter = gains.values().all(|g| *g <= quarter);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "criterion 5 (recurrent >= matched feedforward at every training fraction)",
        all_ge && largest_at_quarter,
        format!("{}; mean relative gain by fraction {gains:.4?}; {secs:.0} s", lines.join("; ")),
    );
}

#[test]
fn c6_multipath_tracks_recurrent() {
    let start = std::time::Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let ds = teacher_dataset(dir.path(), json!({"stimuli": 1000}));
    let cfg = write_config(
        dir.path(),
        "sweep.json",
        &json!({
            "precision": "f32",
            "dataset": ds,
            "model": {"kind": "recurrent", "recurrent_layers": 1},
            "schedule": {
                "batch_size": 16,
                "phases": [
                    {"learning_rate": 1e-3, "max_epochs": 30, "patience": 6},
                    {"learning_rate": 3e-4, "max_epochs": 10, "patience": 3},
                    {"learning_rate": 1e-4, "max_epochs": 5, "patience": 2},
                ],
            },
            "grid": {
                "channels": [1, 2, 4, 8],
                "iterations": [2, 4, 6],
                "readout_modes": ["no_avg", "two_avg"],
                "multipath_twins": true,
            },
        }),
    );
    let out = dir.path().join("sweep");
    run_ok(&["sweep", "--config", s(&cfg), "--out", s(&out), "--jobs", "4"]);
    run_ok(&["report", "--results", s(&out)]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report/report.json")).unwrap()).unwrap();
    let c = &report["correlations"];
    let score_r = c["multipath_vs_recurrent_score"]["r"].as_f64().unwrap_or(f64::NAN);
    let length_r = c["multipath_vs_recurrent_average_length"]["r"].as_f64().unwrap_or(f64::NAN);
    let n = c["multipath_vs_recurrent_score"]["n"].as_u64().unwrap_or(0);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "criterion 6 (multi-path twins track recurrent models)",
        n >= 20 && score_r >= 0.7 && length_r >= 0.8,
        format!("{n} configurations; score r = {score_r:.3}; average path length r = {length_r:.3}; {secs:.0} s"),
    );
}

#[test]
fn c7_path_ablation() {
    let start = std::time::Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let ds = teacher_dataset(dir.path(), json!({}));
    let cfg = write_config(
        dir.path(),
        "ablate.json",
        &json!({
            "precision": "f32",
            "dataset": ds,
            "model": {"kind": "recurrent", "channels": 8, "recurrent_layers": 1, "iterations": 5, "readout_mode": "two_avg"},
            "schedule": desk_schedule(),
        }),
    );
    let out = dir.path().join("ablate");
    run_ok(&["ablate", "--config", s(&cfg), "--out", s(&out), "--windows", "3", "--jobs", "4"]);
    let rows = read_table(&out.join("ablation.csv"));
    let score = |name: &str| rows.iter().find(|r| r["window"] == name).map(|r| field(r, "score")).unwrap_or(f64::NAN);
    let (only, ff) = (score("only-1"), score("feedforward"));
    let windows: Vec<(String, f64)> = rows
        .iter()
        .filter(|r| r["window"].contains('-') && !r["window"].starts_with("only"))
        .map(|r| (r["window"].clone(), field(r, "delta")))
        .collect();
    let longest = windows.last().map_or(f64::NAN, |w| w.1);
    let some_worse = windows[..windows.len().saturating_sub(1)].iter().any(|w| w.1 < longest);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "criterion 7 (path ablation)",
        (only - ff).abs() <= 0.03 && some_worse,
        format!(
            "only-length-1 {only:.4} vs feedforward chain {ff:.4}; baseline {:.4}; window deltas {windows:.4?}; {secs:.0} s",
            score("baseline")
        ),
    );
}

fn digest_tree(root: &Path, names: &[&str]) -> BTreeMap<String, String> {
    use sha2::{Digest, Sha256};
    walkdir::WalkDir::new(root)
        .into_iter()
        .map(Result::unwrap)
        .filter(|e| e.file_type().is_file() && names.iter().any(|n| e.file_name() == *n))
        .map(|e| {
            let rel = e.path().strip_prefix(root).unwrap().display().to_string();
            (rel, hex::encode(Sha256::digest(std::fs::read(e.path()).unwrap())))
        })
        .collect()
}

#[test]
fn c9_reproducible_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let ds = teacher_dataset(dir.path(), json!({"stimuli": 200}));
    let schedule = json!({
        "batch_size": 16,
        "phases": [
            {"learning_rate": 3e-3, "max_epochs": 3, "patience": 2},
            {"learning_rate": 1e-3, "max_epochs": 2, "patience": 1},
        ],
    });
    let train_cfg = write_config(
        dir.path(),
        "train.json",
        &json!({"dataset": ds, "model": {"channels": 4, "iterations": 3}, "schedule": schedule, "seed": 1}),
    );
    let sweep_cfg = write_config(
        dir.path(),
        "sweep.json",
        &json!({
            "dataset": ds,
            "precision": "f32",
            "model": {"channels": 4},
            "schedule": schedule,
            "grid": {"iterations": [2, 3], "seeds": [0], "multipath_twins": true},
        }),
    );
    let tables = [
        "history.csv",
        "scores.csv",
        "result.json",
        "model.ck",
        "results.csv",
        "manifest.json",
        "improvement.csv",
        "improvement_summary.csv",
        "path_length.csv",
        "report.json",
    ];
    let mut digests = Vec::new();
    for rerun in ["a", "b"] {
        let root = dir.path().join(rerun);
        run_ok(&["train", "--config", s(&train_cfg), "--out", s(&root.join("train"))]);
        run_ok(&["sweep", "--config", s(&sweep_cfg), "--out", s(&root.join("sweep"))]);
        run_ok(&["report", "--results", s(&root.join("sweep"))]);
        digests.push(digest_tree(&root, &tables));
    }
    let compared = digests[0].len();
    let differing: Vec<_> = digests[0]
        .iter()
        .filter(|(k, v)| digests[1].get(*k) != Some(v))
        .map(|(k, _)| k.clone())
        .collect();
    verdict(
        "criterion 9 (reproducible reruns)",
        compared >= 20 && differing.is_empty() && digests[0].len() == digests[1].len(),
        format!("{compared} result files hashed per rerun; differing: {differing:?}"),
    );
}
