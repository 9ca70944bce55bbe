use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn sysid(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sysid"));
    cmd.args(args).env_remove("SYSID_OUT");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = sysid(args, &[]);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn config(dir: &Path, name: &str, v: Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, v.to_string()).unwrap();
    p
}

fn tiny_dataset(dir: &Path) -> PathBuf {
    let c = config(dir, "data.json", json!({"teacher": {"stimuli": 60}, "seed": 4}));
    ok(&["gen-data", "--config", s(&c), "--out", s(&dir.join("data"))]);
    dir.join("data/dataset.sysid")
}

fn quick(dir: &Path, ds: &Path, extra: Value) -> PathBuf {
    let mut v = json!({
        "dataset": ds,
        "precision": "f32",
        "model": {"channels": 2, "iterations": 3},
        "schedule": {"batch_size": 16, "phases": [{"learning_rate": 1e-3, "max_epochs": 1, "patience": 1}]},
    });
    for (k, x) in extra.as_object().unwrap() {
        v[k] = x.clone();
    }
    config(dir, "run.json", v)
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(sysid(&["report", "--results", s(&empty)], &[]).status.code(), Some(3));

    let bad = config(dir.path(), "bad.json", json!({"modle": {}}));
    assert_eq!(sysid(&["train", "--config", s(&bad)], &[]).status.code(), Some(2));
    let out_of_range = config(dir.path(), "range.json", json!({"train_fraction": 1.5, "dataset": "x"}));
    assert_eq!(sysid(&["sweep", "--config", s(&out_of_range)], &[]).status.code(), Some(2));
    assert_eq!(sysid(&["train"], &[]).status.code(), Some(2));
    let missing = config(dir.path(), "missing.json", json!({"dataset": dir.path().join("nope.sysid")}));
    assert_eq!(sysid(&["train", "--config", s(&missing)], &[]).status.code(), Some(3));
    assert_eq!(sysid(&["no-such-command"], &[]).status.code(), Some(2));
}

#[test]
fn pipeline_outputs_are_stamped() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path());
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("data/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["stimuli"], 60);

    let cfg = quick(dir.path(), &ds, json!({"seed": 3}));
    let train = dir.path().join("train");
    ok(&["train", "--config", s(&cfg), "--out", s(&train), "--truncate-trials", "4"]);
    for f in ["history.csv", "scores.csv", "result.json", "model.ck", "phase1.ck"] {
        assert!(train.join(f).exists(), "{f}");
    }
    let history = std::fs::read_to_string(train.join("history.csv")).unwrap();
    assert!(history.starts_with("# config_hash=") && history.lines().next().unwrap().ends_with("seed=3"));
    let result: Value = serde_json::from_str(&std::fs::read_to_string(train.join("result.json")).unwrap()).unwrap();
    assert_eq!(result["seed"], 3);
    assert_eq!(result["config_hash"].as_str().unwrap().len(), 64);
    assert!(result["ensemble"]["average_length"].as_f64().unwrap() >= 1.0);
    assert!(!serde_json::to_string(&result).unwrap().contains(s(dir.path())));

    let ck = train.join("model.ck");
    let stdout = ok(&["eval", "--config", s(&cfg), "--checkpoint", s(&ck), "--out", s(&dir.path().join("eval"))]);
    assert!(stdout.contains("CC_norm2"));
    ok(&["multipath", "--checkpoint", s(&ck), "--out", s(&dir.path().join("mp"))]);
    let paths = std::fs::read_to_string(dir.path().join("mp/paths.csv")).unwrap();
    let ensemble: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("mp/ensemble.json")).unwrap()).unwrap();
    assert_eq!(paths.lines().count(), 2 + ensemble["paths"].as_array().unwrap().len());
}

#[test]
fn output_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from-env");
    let c = config(dir.path(), "data.json", json!({"teacher": {"stimuli": 20}, "output_dir": "ignored"}));
    let out = sysid(&["gen-data", "--config", s(&c)], &[("SYSID_OUT", &target)]);
    assert!(out.status.success());
    assert!(target.join("dataset.sysid").exists());
    assert!(!dir.path().join("ignored").exists());
}

#[test]
fn sweep_pairs_and_ablation_rows() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path());
    let cfg = quick(
        dir.path(),
        &ds,
        json!({"grid": {"iterations": [1, 2], "readout_modes": ["no_avg", "late_avg"], "multipath_twins": true}}),
    );
    let out = dir.path().join("sweep");
    ok(&["sweep", "--config", s(&cfg), "--out", s(&out), "--jobs", "2"]);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let runs = manifest["runs"].as_array().unwrap();
    let pairs = manifest["pairs"].as_array().unwrap();
    assert_eq!(pairs.len(), 4);
    assert_eq!(runs.iter().filter(|r| r["role"] == "feedforward").count(), 1);
    for p in pairs {
        assert_eq!(p["matched"], true);
        assert_eq!(p["conv_params"][0], p["conv_params"][1]);
    }
    ok(&["report", "--results", s(&out), "--plot-data"]);
    for f in ["improvement.csv", "improvement_summary.csv", "path_length.csv", "report.json", "plots/fig3_scatter.csv", "plots/fig5_diversity.csv"] {
        assert!(out.join("report").join(f).exists(), "{f}");
    }

    let ablate_cfg = quick(dir.path(), &ds, json!({"model": {"channels": 2, "iterations": 3}}));
    let ab = dir.path().join("ablate");
    ok(&["ablate", "--config", s(&ablate_cfg), "--out", s(&ab), "--windows", "2"]);
    let table = std::fs::read_to_string(ab.join("ablation.csv")).unwrap();
    let names: Vec<_> = table.lines().skip(2).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["baseline", "1-2", "2-3", "only-1", "feedforward"]);
}
