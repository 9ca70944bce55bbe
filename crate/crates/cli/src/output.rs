//! Output files. Every table and report carries the configuration hash and seed.

use std::path::Path;

use serde_json::{Map, Value};

use crate::fail::{data_err, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stamp {
    pub config_hash: String,
    /// `None` for outputs aggregating several seeds.
    pub seed: Option<u64>,
}

impl Stamp {
    fn seed_text(&self) -> String {
        self.seed.map_or_else(|| "all".into(), |s| s.to_string())
    }

    pub fn csv_line(&self) -> String {
        format!("# config_hash={} seed={}\n", self.config_hash, self.seed_text())
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| data_err(format!("cannot create {}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| data_err(format!("cannot write {}: {e}", path.display())))
}

/// Writes `body` (header row first) below the stamp comment line.
pub fn write_csv(path: &Path, stamp: &Stamp, body: &str) -> Result<()> {
    write(path, &format!("{}{body}", stamp.csv_line()))
}

/// Writes a JSON object with `config_hash`, `seed` and `format_version` added.
pub fn write_json(path: &Path, stamp: &Stamp, value: Value) -> Result<()> {
    let mut map = match value {
        Value::Object(m) => m,
        other => {
            let mut m = Map::new();
            m.insert("value".into(), other);
            m
        }
    };
    map.insert("config_hash".into(), Value::String(stamp.config_hash.clone()));
    map.insert("seed".into(), stamp.seed.map_or(Value::Null, Value::from));
    map.insert("format_version".into(), FORMAT_VERSION.into());
    let mut text = serde_json::to_string_pretty(&Value::Object(map))?;
    text.push('\n');
    write(path, &text)
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| data_err(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

/// Comma-separated row; floats use the shortest round-tripping representation.
pub fn row<I: IntoIterator<Item = String>>(fields: I) -> String {
    let mut s = fields.into_iter().collect::<Vec<_>>().join(",");
    s.push('\n');
    s
}

pub fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else {
        String::new()
    }
}
