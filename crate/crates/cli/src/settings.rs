//! Config files and `--set` overrides.
//!
//! A config file is TOML. Overrides are dotted paths (`models.sampler.levels=3`)
//! whose value is parsed as a TOML value, falling back to a plain string.

use std::path::{Path, PathBuf};

use adaptive_depth::Error;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const SNAPSHOT_FILE: &str = "resolved_config.toml";

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub fn read_table(path: Option<&Path>) -> Result<Table, Error> {
    let Some(path) = path else {
        return Ok(Table::new());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
    text.parse::<Table>()
        .map_err(|e| config_err(format!("{}: {}", path.display(), e.message())))
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn apply_override(table: &mut Table, assignment: &str) -> Result<(), Error> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{assignment}` is not KEY=VALUE")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("bad override key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("non-empty key");
    let mut node = table;
    for p in parents {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("override `{key}`: `{p}` is not a table")))?;
    }
    node.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// File, then `--set` overrides in order, then `--seed`.
pub fn resolve_table(config: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<Table, Error> {
    let mut table = read_table(config)?;
    for s in sets {
        apply_override(&mut table, s)?;
    }
    if let Some(seed) = seed {
        let seed = i64::try_from(seed).map_err(|_| config_err("seed must fit in i64"))?;
        table.insert("seed".into(), Value::Integer(seed));
    }
    Ok(table)
}

pub fn from_table<T: DeserializeOwned>(table: Table, what: &str) -> Result<T, Error> {
    T::deserialize(Value::Table(table)).map_err(|e| config_err(format!("{what}: {}", e.message())))
}

/// Removes and parses the `[io]` table, leaving the rest for the typed config.
pub fn split_io<T: DeserializeOwned + Default>(table: &mut Table) -> Result<T, Error> {
    match table.remove("io") {
        None => Ok(T::default()),
        Some(Value::Table(t)) => from_table(t, "io"),
        Some(_) => Err(config_err("`io` must be a table")),
    }
}

/// Paths read by a command.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Io {
    /// Dataset directory or manifest.
    pub data: Option<PathBuf>,
    /// Validation dataset for the joint stage's guard.
    pub val_data: Option<PathBuf>,
    /// Reconstruction store directory.
    pub store: Option<PathBuf>,
    /// Store of reconstructions for `val_data`, needed by stored priors.
    pub val_store: Option<PathBuf>,
    /// Store of lower-bound sampled maps (implicit mode).
    pub references: Option<PathBuf>,
    /// Mask pattern for completion pretraining: `random` or `scanline`.
    pub pattern: adaptive_depth::pipeline::AgnosticSampler,
}

impl Io {
    pub fn require_data(&self) -> Result<&Path, Error> {
        self.data
            .as_deref()
            .ok_or_else(|| config_err("missing field `io.data`"))
    }

    pub fn require_store(&self) -> Result<&Path, Error> {
        self.store
            .as_deref()
            .ok_or_else(|| config_err("missing field `io.store`"))
    }
}

/// Writes the resolved config next to the outputs.
pub fn write_snapshot<T: Serialize>(out: &Path, config: &T, io: Option<&Io>) -> Result<(), Error> {
    let mut table = Table::try_from(config).map_err(|e| config_err(format!("snapshot: {e}")))?;
    if let Some(io) = io {
        let io = Table::try_from(io).map_err(|e| config_err(format!("snapshot: {e}")))?;
        table.insert("io".into(), Value::Table(io));
    }
    let text = toml::to_string_pretty(&table).map_err(|e| config_err(format!("snapshot: {e}")))?;
    let path = out.join(SNAPSHOT_FILE);
    std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_create_nested_tables_and_parse_values() {
        let mut t = Table::new();
        apply_override(&mut t, "models.sampler.levels=3").unwrap();
        apply_override(&mut t, "stage=train_sampler").unwrap();
        apply_override(&mut t, "learning_rate = 0.5").unwrap();
        assert_eq!(t["models"]["sampler"]["levels"].as_integer(), Some(3));
        assert_eq!(t["stage"].as_str(), Some("train_sampler"));
        assert_eq!(t["learning_rate"].as_float(), Some(0.5));
    }

    #[test]
    fn malformed_overrides_are_config_errors() {
        let mut t = Table::new();
        assert!(matches!(apply_override(&mut t, "novalue"), Err(Error::Config(_))));
        assert!(matches!(apply_override(&mut t, "a..b=1"), Err(Error::Config(_))));
        apply_override(&mut t, "a=1").unwrap();
        assert!(matches!(apply_override(&mut t, "a.b=1"), Err(Error::Config(_))));
    }

    #[test]
    fn seed_flag_wins() {
        let t = resolve_table(None, &["seed=3".into()], Some(9)).unwrap();
        assert_eq!(t["seed"].as_integer(), Some(9));
    }
}
