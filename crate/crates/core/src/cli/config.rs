//! `key=value` run configuration with per-command key tables.

use std::collections::HashSet;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{Error, Result};

/// Effective settings of one command: defaults, then the config file, then
/// `--set` overrides. Keys outside the command's table are rejected.
#[derive(Clone, Debug)]
pub struct RunConfig {
    values: IndexMap<String, String>,
    explicit: HashSet<String>,
}

impl RunConfig {
    pub fn new(defaults: &[(&str, &str)]) -> Self {
        RunConfig {
            values: defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            explicit: HashSet::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                self.explicit.insert(key.to_string());
                Ok(())
            }
            None => Err(Error::invalid(format!("unknown config key `{key}`"))),
        }
    }

    /// Apply `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("config line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text)
    }

    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::invalid(format!("override `{kv}` is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse().map_err(|e| Error::invalid(format!("config key `{key}` = `{raw}`: {e}")))
    }

    /// Comma separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| Error::invalid(format!("config key `{key}` item `{s}`: {e}"))))
            .collect()
    }

    /// Overwrite a value with the one actually used, without marking it explicit.
    pub fn resolve(&mut self, key: &str, value: impl ToString) {
        if let Some(v) = self.values.get_mut(key) {
            *v = value.to_string();
        }
    }

    pub fn snapshot(&self, seed: u64) -> String {
        let mut s = format!("seed={seed}\n");
        for (k, v) in &self.values {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layering_and_unknown_keys() {
        let mut c = RunConfig::new(&[("steps", "10"), ("lr", "1e-5")]);
        c.apply_text("# comment\nsteps = 20\n\n").unwrap();
        c.apply_override("lr=0.5").unwrap();
        assert_eq!(c.get::<usize>("steps").unwrap(), 20);
        assert_eq!(c.get::<f64>("lr").unwrap(), 0.5);
        assert!(c.is_explicit("steps"));
        assert!(c.apply_text("bogus=1").is_err());
        assert!(c.apply_text("no equals sign").is_err());
        assert!(c.get::<usize>("lr").is_err());
        assert_eq!(c.snapshot(3), "seed=3\nsteps=20\nlr=0.5\n");
    }
}
