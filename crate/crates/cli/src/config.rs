//! Flat key-value run configuration: defaults < config file < environment
//! (`LONGCLIP_<KEY>`) < command-line flags.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

pub const ENV_PREFIX: &str = "LONGCLIP_";

/// Effective configuration of one command. Keys are fixed by the defaults;
/// a `null` default marks an optional (or required) value with no default.
#[derive(Debug, Clone)]
pub struct RunConfig {
    values: Map<String, Value>,
}

/// Converts a command-line or environment string to the type of the
/// default it overrides.
fn coerce(key: &str, default: &Value, raw: &str) -> Result<Value> {
    let bad = |what: &str| anyhow!("{key}: expected {what}, got '{raw}'");
    Ok(match default {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad("true or false"))?),
        Value::Number(n) if n.is_f64() => {
            let v: f64 = raw.parse().map_err(|_| bad("a number"))?;
            serde_json::Number::from_f64(v).map(Value::Number).ok_or_else(|| bad("a finite number"))?
        }
        Value::Number(_) => Value::Number(raw.parse::<u64>().map_err(|_| bad("a non-negative integer"))?.into()),
        _ => Value::String(raw.to_string()),
    })
}

/// Checks a file-supplied value against the type of its default.
fn check_type(key: &str, default: &Value, value: Value) -> Result<Value> {
    let ok = match (default, &value) {
        (Value::Null, Value::String(_) | Value::Number(_) | Value::Bool(_)) => true,
        (Value::Number(d), Value::Number(v)) => d.is_f64() || v.is_u64(),
        (d, v) => std::mem::discriminant(d) == std::mem::discriminant(v),
    };
    if !ok {
        bail!("{key}: value {value} does not match the expected type of {default}");
    }
    Ok(match (default, value) {
        // integers are accepted where reals are expected
        (Value::Number(d), Value::Number(v)) if d.is_f64() => {
            Value::Number(serde_json::Number::from_f64(v.as_f64().unwrap_or(f64::NAN)).ok_or_else(|| anyhow!("{key}: not finite"))?)
        }
        (Value::Null, Value::Number(v)) => Value::String(v.to_string()),
        (Value::Null, Value::Bool(v)) => Value::String(v.to_string()),
        (_, v) => v,
    })
}

impl RunConfig {
    pub fn new(defaults: Map<String, Value>) -> Self {
        Self { values: defaults }
    }

    /// Defaults taken from a serializable struct's fields.
    pub fn defaults_of<T: Serialize>(value: &T) -> Map<String, Value> {
        match serde_json::to_value(value).expect("config struct serializes") {
            Value::Object(map) => map,
            _ => panic!("config struct must serialize to an object"),
        }
    }

    #[cfg(test)]
    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.values.keys()
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).with_context(|| format!("--config: cannot read {}", path.display()))?;
        let table: toml::Table = toml::from_str(&text).with_context(|| format!("--config: {} is not valid", path.display()))?;
        for (key, value) in table {
            let default = self
                .values
                .get(&key)
                .ok_or_else(|| anyhow!("{}: unknown key '{key}'", path.display()))?;
            let value = serde_json::to_value(&value)?;
            if matches!(value, Value::Object(_) | Value::Array(_)) {
                bail!("{}: key '{key}' must be a plain value (the config is flat)", path.display());
            }
            let checked = check_type(&key, default, value)?;
            self.values.insert(key, checked);
        }
        Ok(())
    }

    /// Applies `LONGCLIP_<KEY>` variables. Variables naming a key of another
    /// command are ignored; names known to no command are rejected.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>, all_keys: &BTreeSet<String>) -> Result<()> {
        for (name, raw) in vars {
            let Some(suffix) = name.strip_prefix(ENV_PREFIX) else { continue };
            let key = suffix.to_ascii_lowercase();
            if self.values.contains_key(&key) {
                self.set(&key, &raw).with_context(|| format!("environment variable {name}"))?;
            } else if !all_keys.contains(&key) {
                bail!("environment variable {name} names unknown key '{key}'");
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let default = self.values.get(key).ok_or_else(|| anyhow!("unknown key '{key}'"))?;
        let v = coerce(key, default, raw)?;
        self.values.insert(key.to_string(), v);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.values.get(key).filter(|v| !v.is_null())
    }

    /// A value without default that the user must supply via `--flag`.
    pub fn required_str(&self, key: &str) -> Result<String> {
        self.opt_str(key)
            .ok_or_else(|| anyhow!("missing required --{} (or '{key}' in the config file)", key.replace('_', "-")))
    }

    pub fn opt_str(&self, key: &str) -> Option<String> {
        self.get(key).map(|v| match v {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        })
    }

    pub fn str(&self, key: &str) -> String {
        self.opt_str(key).unwrap_or_default()
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.get(key)
            .and_then(Value::as_u64)
            .ok_or_else(|| anyhow!("{key} must be a non-negative integer"))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        Ok(self.u64(key)? as usize)
    }

    /// Comma-separated list of positive integers, e.g. `1,5,10`.
    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        let raw = self.str(key);
        let list = raw
            .split(',')
            .map(|s| s.trim().parse::<usize>().map_err(|_| anyhow!("--{}: '{s}' is not a count", key.replace('_', "-"))))
            .collect::<Result<Vec<_>>>()?;
        if list.is_empty() || list.contains(&0) {
            bail!("--{}: expected a comma-separated list of positive integers", key.replace('_', "-"));
        }
        Ok(list)
    }

    /// Deserializes the subset of keys belonging to `T`.
    pub fn extract<T: Serialize + DeserializeOwned>(&self, template: &T) -> Result<T> {
        let mut map = Self::defaults_of(template);
        for (k, v) in map.iter_mut() {
            if let Some(value) = self.values.get(k) {
                *v = value.clone();
            }
        }
        serde_json::from_value(Value::Object(map)).map_err(|e| anyhow!("invalid configuration: {e}"))
    }

    /// The effective configuration as flat TOML, loadable with `--config`.
    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            match v {
                Value::Null => out.push_str(&format!("# {k} (unset)\n")),
                Value::String(s) => out.push_str(&format!("{k} = {}\n", toml::Value::String(s.clone()))),
                Value::Number(n) if n.is_f64() => {
                    let f = n.as_f64().unwrap_or(f64::NAN);
                    out.push_str(&format!("{k} = {}\n", toml::Value::Float(f)));
                }
                other => out.push_str(&format!("{k} = {other}\n")),
            }
        }
        out
    }
}
