//! Setting layers: config file, then environment, then flags.

use std::collections::BTreeMap;
use std::path::Path;

use juvenotes_server::config::KEYS;

use crate::CliError;

pub type Vars = BTreeMap<String, String>;

/// Reads a TOML file whose top-level keys are the environment variable
/// names.
pub fn from_config_file(path: &Path) -> Result<Vars, CliError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    let table: toml::Table =
        raw.parse().map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
    let mut vars = Vars::new();
    for (key, value) in table {
        if !KEYS.contains(&key.as_str()) {
            return Err(CliError::usage(format!("config {}: unknown key {key}", path.display())));
        }
        let text = match value {
            toml::Value::String(s) => s,
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Boolean(b) => b.to_string(),
            other => {
                return Err(CliError::usage(format!("config {}: {key} must be a string, integer or boolean, got {}", path.display(), other.type_str())))
            }
        };
        vars.insert(key, text);
    }
    Ok(vars)
}

pub fn from_env() -> Vars {
    KEYS.iter().filter_map(|k| std::env::var(k).ok().map(|v| (k.to_string(), v))).collect()
}

/// Later layers win.
pub fn merge(layers: impl IntoIterator<Item = Vars>) -> Vars {
    let mut out = Vars::new();
    for layer in layers {
        out.extend(layer);
    }
    out
}
