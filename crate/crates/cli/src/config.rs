//! Config files, `--set` overrides and run manifests.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Parses `value` as JSON, falling back to a plain string.
fn parse_scalar(value: &str) -> Value {
    serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()))
}

/// Sets `root[a][b]...` for a dotted `key`, creating intermediate objects.
pub fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    if key.is_empty() || key.split('.').any(str::is_empty) {
        bail!("malformed override key {key:?}");
    }
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = match cur {
            Value::Object(m) => m,
            Value::Null => {
                *cur = Value::Object(Map::new());
                cur.as_object_mut().expect("just set")
            }
            _ => bail!("override {key:?}: {} is not an object", parts[..i].join(".")),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last segment")
}

/// Applies `key=value` overrides in order.
pub fn apply_overrides(root: &mut Value, sets: &[String]) -> Result<()> {
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .with_context(|| format!("override {s:?} is not of the form key=value"))?;
        set_path(root, k.trim(), parse_scalar(v.trim()))?;
    }
    Ok(())
}

pub fn read_value(path: Option<&Path>) -> Result<Value> {
    match path {
        None => Ok(Value::Object(Map::new())),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

/// Reads, overrides and deserializes a config. Unknown keys are rejected by
/// the target type.
pub fn load<T: DeserializeOwned>(path: Option<&Path>, seed: Option<u64>, sets: &[String]) -> Result<(T, Value)> {
    let mut v = read_value(path)?;
    if !v.is_object() {
        bail!("config must be a JSON object");
    }
    if let Some(s) = seed {
        set_path(&mut v, "seed", Value::from(s))?;
    }
    apply_overrides(&mut v, sets)?;
    let parsed = serde_json::from_value(v.clone()).context("invalid config")?;
    Ok((parsed, v))
}

#[derive(Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub git: &'static str,
    pub command: &'a str,
    pub seed: u64,
    pub timestamp_unix: u64,
    pub config: Value,
    pub outputs: Vec<String>,
}

pub fn write_manifest(dir: &Path, command: &str, seed: u64, config: Value, outputs: &[&Path]) -> Result<()> {
    let m = Manifest {
        tool: "ebdreg",
        version: env!("CARGO_PKG_VERSION"),
        git: env!("EBDREG_GIT_HASH"),
        command,
        seed,
        timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        config,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&m)? + "\n").with_context(|| format!("writing {}", path.display()))
}
