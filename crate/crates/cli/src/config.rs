//! Flat `key: value` experiment configs.
//!
//! Keys are the dotted paths of [`ExperimentConfig`] leaves (`data.height`,
//! `annotator.epochs`, `variant`). A config file is a JSON object holding any
//! subset of them, either flat or nested. Flags are applied afterwards and win.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use budgetseg_core::pipeline::ExperimentConfig;
use serde_json::{Map, Value};

use crate::CliError;

/// Short flag names for the most common keys.
pub const ALIASES: &[(&str, &str)] = &[
    ("n", "n_strong"),
    ("m", "m_weak"),
    ("weak", "weak_kind"),
    ("pool", "pool_size"),
    ("data_seed", "seeds.data"),
    ("split_seed", "seeds.split"),
    ("init_seed", "seeds.init"),
];

pub fn flatten(value: &Value) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            leaf => {
                out.insert(prefix.to_string(), leaf.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", value, &mut out);
    out
}

pub fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            node = node
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("config paths never collide with leaves");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

fn resolve(key: &str) -> String {
    let k = key.trim().replace('-', "_");
    ALIASES.iter().find(|(a, _)| *a == k).map_or(k, |(_, full)| full.to_string())
}

fn same_kind(default: &Value, given: &Value) -> bool {
    match (default, given) {
        (Value::Number(d), Value::Number(g)) => !(d.is_u64() || d.is_i64()) || g.is_u64() || g.is_i64(),
        (Value::String(_), Value::String(_)) | (Value::Bool(_), Value::Bool(_)) => true,
        _ => false,
    }
}

/// Mutable view of a config as flat keys.
#[derive(Debug, Clone)]
pub struct FlatConfig {
    values: BTreeMap<String, Value>,
}

impl FlatConfig {
    pub fn new(base: &ExperimentConfig) -> Self {
        FlatConfig {
            values: flatten(&serde_json::to_value(base).expect("config serialises")),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: Value) -> Result<(), CliError> {
        let full = resolve(key);
        let Some(default) = self.values.get(&full) else {
            return Err(CliError::Usage(format!("unknown config key `{key}`")));
        };
        if !same_kind(default, &value) {
            return Err(CliError::Usage(format!("config key `{key}` expects a value like {default}, got {value}")));
        }
        self.values.insert(full, value);
        Ok(())
    }

    /// Sets a key from command-line text; string-valued keys take it verbatim.
    pub fn set_text(&mut self, key: &str, text: &str) -> Result<(), CliError> {
        let full = resolve(key);
        let value = match self.values.get(&full) {
            Some(Value::String(_)) => Value::String(text.to_string()),
            _ => serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string())),
        };
        self.set(key, value)
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        if !value.is_object() {
            return Err(CliError::Usage(format!("config {} must be a JSON object", path.display())));
        }
        for (k, v) in flatten(&value) {
            self.set(&k, v)?;
        }
        Ok(())
    }

    /// Builds the config, naming the offending key when a value is rejected.
    pub fn build(&self) -> Result<ExperimentConfig, CliError> {
        serde_json::from_value(unflatten(&self.values)).map_err(|e| {
            let msg = e.to_string();
            let key = self
                .values
                .iter()
                .find(|(_, v)| v.as_str().is_some_and(|s| msg.contains(s)))
                .map(|(k, _)| k.as_str());
            match key {
                Some(k) => CliError::Usage(format!("config key `{k}`: {msg}")),
                None => CliError::Usage(format!("invalid config: {msg}")),
            }
        })
    }
}

/// Default config, then the file, then `key=value` overrides.
pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig, CliError> {
    let mut flat = FlatConfig::new(&ExperimentConfig::default());
    if let Some(p) = path {
        flat.merge_file(p)?;
    }
    for (k, v) in overrides {
        flat.set_text(k, v)?;
    }
    flat.build()
}
