//! Plain-text `key = value` configuration files with `#` comments.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered key/value pairs. Typed readers remove the keys they understand so
/// leftovers can be reported as unknown.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got `{}`",
                    lineno + 1,
                    raw.trim()
                ))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{}`",
                    lineno + 1,
                    k
                )));
            }
        }
        Ok(KvConfig { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Removes and parses `key`, if present.
    pub fn take<V: FromStr>(&mut self, key: &str) -> Result<Option<V>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<V>()
                .map(Some)
                .map_err(|_| Error::Config(format!("invalid value `{}` for `{}`", raw, key))),
        }
    }

    /// Overwrites `slot` when `key` is present.
    pub fn take_into<V: FromStr>(&mut self, key: &str, slot: &mut V) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Errors if any key was not consumed.
    pub fn ensure_consumed(&self) -> Result<()> {
        if self.entries.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown keys: {}",
                self.entries.keys().cloned().collect::<Vec<_>>().join(", ")
            )))
        }
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{} = {}\n", k, v))
            .collect()
    }
}
