//! Layered settings: flags, then the subcommand's section of `--config`,
//! then built-in defaults.

use crate::error::CliError;
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

pub const DATA_DIR_VAR: &str = "CBQA_DATA_DIR";

pub struct Settings {
    section: Map<String, Value>,
    used: BTreeSet<String>,
    name: String,
}

impl Settings {
    pub fn load(path: Option<&Path>, subcommand: &str) -> Result<Self, CliError> {
        let mut section = Map::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            let root: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
            let Value::Object(mut root) = root else {
                return Err(CliError::Config(format!("config {} must be a JSON object", path.display())));
            };
            match root.remove(subcommand) {
                None => {}
                Some(Value::Object(s)) => section = s,
                Some(_) => return Err(CliError::Config(format!("config section `{subcommand}` must be an object"))),
            }
        }
        Ok(Settings {
            section,
            used: BTreeSet::new(),
            name: subcommand.to_string(),
        })
    }

    pub fn get_opt<T: DeserializeOwned>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError> {
        self.used.insert(key.to_string());
        if flag.is_some() {
            return Ok(flag);
        }
        match self.section.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .map_err(|e| CliError::Config(format!("config `{}.{key}`: {e}", self.name))),
        }
    }

    pub fn get<T: DeserializeOwned>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError> {
        Ok(self.get_opt(key, flag)?.unwrap_or(default))
    }

    /// Reject config keys no setting asked for.
    pub fn finish(self) -> Result<(), CliError> {
        let unknown: Vec<&String> = self.section.keys().filter(|k| !self.used.contains(*k)).collect();
        if unknown.is_empty() {
            return Ok(());
        }
        let valid: Vec<&String> = self.used.iter().collect();
        Err(CliError::Config(format!(
            "unknown keys {unknown:?} in config section `{}` (valid: {valid:?})",
            self.name
        )))
    }
}

/// Relative paths that do not exist are looked up under `$CBQA_DATA_DIR`.
pub fn input_path(path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        if let Some(dir) = std::env::var_os(DATA_DIR_VAR) {
            let candidate = Path::new(&dir).join(path);
            if candidate.exists() {
                return candidate;
            }
        }
    }
    path.to_path_buf()
}
