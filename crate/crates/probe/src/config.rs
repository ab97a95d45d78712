//! Plain-text `key=value` files: run configurations, dataset descriptors and
//! LRP composites. Blank lines and lines starting with `#` are ignored; keys
//! keep their file order.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use concept_probe_core::lrp::{Composite, LrpRule, DEFAULT_EPSILON};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs<K: Into<String>, V: Into<String>>(pairs: impl IntoIterator<Item = (K, V)>) -> Self {
        let mut kv = Self::new();
        for (k, v) in pairs {
            kv.set(k, v);
        }
        kv
    }

    pub fn parse_str(text: &str, origin: &str) -> Result<Self> {
        let mut kv = Self::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("{origin}:{}: expected key=value, got {line:?}", n + 1)));
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("{origin}:{}: empty key", n + 1)));
            }
            if kv.get(key).is_some() {
                return Err(Error::Config(format!("{origin}:{}: duplicate key {key}", n + 1)));
            }
            kv.entries.push((key.to_string(), value.trim().to_string()));
        }
        Ok(kv)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse_str(&text, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string()).map_err(Error::io(path))
    }

    /// Replace the value of `key` in place, or append it.
    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        let (key, value) = (key.into(), value.into());
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        match self.get(key) {
            Some(v) if !v.is_empty() => Ok(v),
            _ => Err(Error::Config(format!("missing required value `{key}`"))),
        }
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self.require(key)?;
        raw.parse().map_err(|e| Error::Config(format!("`{key}={raw}`: {e}")))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

impl fmt::Display for KeyValues {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

/// Parse one rule value: `epsilon:<eps>`, `epsilon`, `alphabeta` or `pass`.
pub fn parse_rule(value: &str) -> Result<LrpRule> {
    let bad = || Error::Config(format!("unknown LRP rule {value:?}"));
    Ok(match value.split_once(':') {
        Some(("epsilon", eps)) => LrpRule::Epsilon(eps.trim().parse().map_err(|_| bad())?),
        Some(_) => return Err(bad()),
        None => match value {
            "epsilon" => LrpRule::Epsilon(DEFAULT_EPSILON),
            "alphabeta" => LrpRule::AlphaBeta,
            "pass" => LrpRule::Pass,
            _ => return Err(bad()),
        },
    })
}

/// Build a composite from `rule.<glob>=<rule>` lines, in file order.
pub fn parse_composite(kv: &KeyValues) -> Result<Composite> {
    let mut composite = Composite::new();
    for (key, value) in kv.iter() {
        let Some(glob) = key.strip_prefix("rule.") else {
            return Err(Error::Config(format!("composite key {key:?} does not start with `rule.`")));
        };
        composite = composite.with_rule(glob, parse_rule(value)?);
    }
    Ok(composite)
}

pub fn load_composite(path: &Path) -> Result<Composite> {
    parse_composite(&KeyValues::read(path)?)
}
