//! Name-keyed factories used to pick algorithm variants at runtime.

use std::collections::BTreeMap;

use serde_json::Value;

use crate::error::{invalid, Result};

pub type Factory<T> = Box<dyn Fn(&Value) -> Result<T> + Send + Sync>;

pub struct Registry<T> {
    kind: &'static str,
    entries: BTreeMap<String, Factory<T>>,
}

impl<T> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self { kind, entries: BTreeMap::new() }
    }

    pub fn register(
        &mut self,
        name: &str,
        factory: impl Fn(&Value) -> Result<T> + Send + Sync + 'static,
    ) {
        self.entries.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn build(&self, name: &str, params: &Value) -> Result<T> {
        match self.entries.get(name) {
            Some(f) => f(params),
            None => Err(invalid(format!(
                "unknown {} '{name}' (known: {})",
                self.kind,
                self.names().join(", ")
            ))),
        }
    }
}

/// Reads an optional field, falling back to `default`.
pub(crate) fn field_or<T: serde::de::DeserializeOwned>(v: &Value, key: &str, default: T) -> Result<T> {
    match v.get(key) {
        None | Some(Value::Null) => Ok(default),
        Some(x) => serde_json::from_value(x.clone())
            .map_err(|e| invalid(format!("field '{key}': {e}"))),
    }
}

pub(crate) fn field<T: serde::de::DeserializeOwned>(v: &Value, key: &str) -> Result<T> {
    match v.get(key) {
        None | Some(Value::Null) => Err(invalid(format!("missing field '{key}'"))),
        Some(x) => serde_json::from_value(x.clone())
            .map_err(|e| invalid(format!("field '{key}': {e}"))),
    }
}
