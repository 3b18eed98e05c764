//! Flat dotted-key JSON config files.
//!
//! A file holds one object whose keys are namespaced by subcommand, e.g.
//! `{"train.epochs": 5, "train.variant": "fm2"}`. Values fill in flags the
//! command line left unset; unknown keys are rejected.

use lczlab_core::{Error, Result};
use serde_json::Value;
use std::collections::BTreeMap;
use std::path::Path;

pub struct ConfigFile {
    values: BTreeMap<String, Value>,
}

impl ConfigFile {
    pub fn empty() -> Self {
        ConfigFile {
            values: BTreeMap::new(),
        }
    }

    /// Load and validate against the active subcommand's known keys.
    pub fn load(path: Option<&Path>, namespace: &str, known: &[&str]) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::empty());
        };
        let text = std::fs::read_to_string(path)?;
        let parsed: Value = serde_json::from_str(&text)?;
        let Value::Object(map) = parsed else {
            return Err(Error::Config(format!(
                "{}: config must be a JSON object",
                path.display()
            )));
        };
        let mut values = BTreeMap::new();
        for (key, value) in map {
            let field = key.strip_prefix(&format!("{namespace}.")).ok_or_else(|| {
                Error::Config(format!(
                    "unknown config key {key:?} (expected {namespace}.<field>)"
                ))
            })?;
            if !known.contains(&field) {
                return Err(Error::Config(format!(
                    "unknown config key {key:?}; known fields: {known:?}"
                )));
            }
            values.insert(field.to_string(), value);
        }
        Ok(ConfigFile { values })
    }

    pub fn string(&self, field: &str) -> Result<Option<String>> {
        match self.values.get(field) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(other) => Err(Error::Config(format!(
                "config field {field:?} must be a string, got {other}"
            ))),
        }
    }

    pub fn u64(&self, field: &str) -> Result<Option<u64>> {
        match self.values.get(field) {
            None => Ok(None),
            Some(Value::Number(n)) if n.as_u64().is_some() => Ok(n.as_u64()),
            Some(other) => Err(Error::Config(format!(
                "config field {field:?} must be a non-negative integer, got {other}"
            ))),
        }
    }

    pub fn usize(&self, field: &str) -> Result<Option<usize>> {
        Ok(self.u64(field)?.map(|v| v as usize))
    }

    pub fn f64(&self, field: &str) -> Result<Option<f64>> {
        match self.values.get(field) {
            None => Ok(None),
            Some(Value::Number(n)) => Ok(n.as_f64()),
            Some(other) => Err(Error::Config(format!(
                "config field {field:?} must be a number, got {other}"
            ))),
        }
    }

    pub fn bool(&self, field: &str) -> Result<Option<bool>> {
        match self.values.get(field) {
            None => Ok(None),
            Some(Value::Bool(b)) => Ok(Some(*b)),
            Some(other) => Err(Error::Config(format!(
                "config field {field:?} must be a boolean, got {other}"
            ))),
        }
    }
}
