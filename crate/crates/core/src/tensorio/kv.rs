//! `key=value` text files used for configs and bundle manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::{Error, Result};

/// Ordered `key=value` map. `#` starts a comment line; blank lines are skipped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvFile {
    entries: BTreeMap<String, String>,
}

impl KvFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1))
            })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
        }
        Ok(KvFile { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, header: &str) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for line in header.lines() {
            let _ = writeln!(out, "# {line}");
        }
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing key {key:?}")))
    }

    pub fn parse_value<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("key {key:?}: cannot parse {raw:?}")))
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        if self.contains(key) {
            self.parse_value(key)
        } else {
            Ok(default)
        }
    }

    /// Comma-separated list of numbers. Entries may be fractions like `1/4`.
    pub fn parse_f32_list(&self, key: &str) -> Result<Vec<f32>> {
        parse_f32_list(self.require(key)?)
            .map_err(|e| Error::Config(format!("key {key:?}: {e}")))
    }
}

/// Parses `1, 1/2, 0.25` style lists.
pub fn parse_f32_list(raw: &str) -> std::result::Result<Vec<f32>, String> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse_fraction)
        .collect()
}

pub fn parse_fraction(s: &str) -> std::result::Result<f32, String> {
    match s.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().map_err(|_| format!("bad number {s:?}"))?;
            let d: f64 = d.trim().parse().map_err(|_| format!("bad number {s:?}"))?;
            if d == 0.0 {
                return Err(format!("division by zero in {s:?}"));
            }
            Ok((n / d) as f32)
        }
        None => s.parse::<f32>().map_err(|_| format!("bad number {s:?}")),
    }
}
