//! Flat key=value configuration files: UTF-8, `#` comments, one pair per
//! line. Unknown keys are a hard error, CLI flags override file values,
//! and the environment is never consulted.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub type ConfigResult<T> = Result<T, ConfigError>;

/// A merged configuration with its declared key schema.
#[derive(Debug, Clone)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn new() -> Self {
        Config {
            values: BTreeMap::new(),
        }
    }

    pub fn from_file(path: &Path) -> ConfigResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        let mut values = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {} is not key=value: {raw:?}", ln + 1)))?;
            values.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Config { values })
    }

    /// CLI flags override file values.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn set_if_absent(&mut self, key: &str, value: impl ToString) {
        self.values
            .entry(key.to_string())
            .or_insert_with(|| value.to_string());
    }

    /// Reject any key outside the command's schema, naming the offender.
    pub fn check_schema(&self, allowed: &[&str]) -> ConfigResult<()> {
        for key in self.values.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(ConfigError(format!(
                    "unknown key {key:?}; allowed keys: {}",
                    allowed.join(", ")
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn require(&self, key: &str) -> ConfigResult<&str> {
        self.get(key)
            .ok_or_else(|| ConfigError(format!("missing required key {key:?}")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> ConfigResult<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self.require(key)?;
        raw.parse::<T>()
            .map_err(|e| ConfigError(format!("bad value for {key:?} ({raw:?}): {e}")))
    }

    pub fn parse_or<T: std::str::FromStr>(&self, key: &str, default: T) -> ConfigResult<T>
    where
        T::Err: fmt::Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(_) => self.parse(key),
        }
    }

    pub fn parse_list<T: std::str::FromStr>(&self, key: &str) -> ConfigResult<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        let raw = self.require(key)?;
        raw.split(',')
            .map(|p| {
                p.trim()
                    .parse::<T>()
                    .map_err(|e| ConfigError(format!("bad list entry {p:?} for {key:?}: {e}")))
            })
            .collect()
    }

    /// Canonical `key=value` lines, sorted; used for the echo and hash.
    /// The thread count is execution infrastructure (outputs are invariant
    /// to the pool size by construction) and is left out.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            if k == "threads" {
                continue;
            }
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut m = self.values.clone();
        m.remove("threads");
        m
    }
}

impl Default for Config {
    fn default() -> Self {
        Self::new()
    }
}
