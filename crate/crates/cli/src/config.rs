//! Configuration files with dotted-key overrides.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub const SNAPSHOT_FILE: &str = "config.toml";

/// Parses `key.path=value`; the value is read as a TOML literal and falls
/// back to a plain string.
fn parse_override(spec: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override {spec:?} is not of the form key=value"))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        bail!("override {spec:?} has an empty key segment");
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn apply(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override path segment {p:?} is not a table"))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Reads `path` (an empty table when absent), applies overrides and
/// deserializes. Unknown keys are rejected by the target types that deny
/// them; missing keys take defaults.
pub fn load<T: DeserializeOwned>(path: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            text.parse::<toml::Table>()
                .with_context(|| format!("parsing config {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        let (key, value) = parse_override(o)?;
        apply(&mut table, &key, value)?;
    }
    T::deserialize(toml::Value::Table(table)).context("invalid configuration")
}

/// Writes the resolved configuration into the run directory.
pub fn snapshot(dir: &Path, config: &impl Serialize) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let text = toml::to_string_pretty(config).context("serializing configuration snapshot")?;
    let path = dir.join(SNAPSHOT_FILE);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}
