//! Training jobs run as independent `train` processes over disjoint directories.

use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde_json::Value;

use super::train::RESULT_FILE;
use crate::config::ExperimentConfig;
use crate::fail::{data_err, ExitCode, Fail, Result};
use crate::output::{ensure_dir, read_json};

#[derive(Clone, Debug)]
pub struct Job {
    pub label: String,
    pub config: ExperimentConfig,
    /// Relative to the command's output directory.
    pub dir: PathBuf,
}

pub const RUNS_DIR: &str = "runs";

impl Job {
    pub fn new(label: String, config: ExperimentConfig) -> Self {
        let dir = Path::new(RUNS_DIR).join(&label);
        Job {
            config: ExperimentConfig {
                label: Some(label.clone()),
                ..config
            },
            label,
            dir,
        }
    }
}

/// Runs every job not already completed under the same configuration hash, at most
/// `parallel` at a time. Child output goes to `log.txt` in the job directory.
pub fn run_jobs(jobs: &[Job], root: &Path, digest: &str, parallel: usize) -> Result<()> {
    let exe = std::env::current_exe().map_err(|e| data_err(format!("cannot locate the executable: {e}")))?;
    let mut pending = Vec::new();
    for job in jobs {
        let dir = root.join(&job.dir);
        ensure_dir(&dir)?;
        let path = dir.join("config.json");
        let text = serde_json::to_string_pretty(&ExperimentConfig {
            output_dir: dir.clone(),
            ..job.config.clone()
        })?;
        std::fs::write(&path, text + "\n")?;
        let done = read_json(&dir.join(RESULT_FILE))
            .ok()
            .is_some_and(|r| r["config_hash"] == Value::String(job.config.hash(Some(digest))));
        if !done {
            pending.push((job.label.clone(), dir));
        }
    }
    let next = AtomicUsize::new(0);
    let failures = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..parallel.max(1).min(pending.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((label, dir)) = pending.get(i) else { break };
                if let Err(code) = run_one(&exe, dir) {
                    failures.lock().unwrap().push((label.clone(), code));
                }
            });
        }
    });
    let mut failures = failures.into_inner().unwrap();
    failures.sort();
    if let Some((label, code)) = failures.first() {
        return Err(Fail {
            code: *code,
            message: format!(
                "{} of {} jobs failed, first `{label}` (see its log.txt)",
                failures.len(),
                pending.len()
            ),
        }
        .into());
    }
    Ok(())
}

fn run_one(exe: &Path, dir: &Path) -> std::result::Result<(), ExitCode> {
    let log = std::fs::File::create(dir.join("log.txt")).map_err(|_| ExitCode::Data)?;
    let err_log = log.try_clone().map_err(|_| ExitCode::Data)?;
    let status = Command::new(exe)
        .arg("train")
        .arg("--config")
        .arg(dir.join("config.json"))
        .arg("--out")
        .arg(dir)
        .stdin(Stdio::null())
        .stdout(log)
        .stderr(err_log)
        .status()
        .map_err(|_| ExitCode::Data)?;
    match status.code() {
        Some(0) => Ok(()),
        Some(2) => Err(ExitCode::Config),
        Some(4) => Err(ExitCode::Numerical),
        _ => Err(ExitCode::Data),
    }
}

/// `result.json` of a finished job.
pub fn job_result(root: &Path, job: &Job) -> Result<Value> {
    read_json(&root.join(&job.dir).join(RESULT_FILE))
}
