//! Line-oriented configuration files: `[section]` headers over
//! `key = value` pairs, `#` comments, blank lines ignored. Flat text so a
//! run's configuration can be diffed, hashed, and reproduced exactly.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::CliError;

#[derive(Debug, Clone, Default)]
pub struct Config {
    sections: BTreeMap<String, BTreeMap<String, String>>,
    /// Where the file came from, for error messages.
    pub path: PathBuf,
    /// Content hash of the raw bytes, recorded in run manifests.
    pub hash: String,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&raw, path)?;
        cfg.hash = lsgc_core::metrics::content_hash(raw.as_bytes());
        Ok(cfg)
    }

    pub fn parse(raw: &str, path: &Path) -> Result<Self, CliError> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::new();
        for (lineno, line) in raw.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    CliError::Usage(format!(
                        "{}:{}: unterminated section header {line:?}",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                current = name.trim().to_owned();
                sections.entry(current.clone()).or_default();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!(
                    "{}:{}: expected `key = value`, found {line:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(CliError::Usage(format!(
                    "{}:{}: empty key",
                    path.display(),
                    lineno + 1
                )));
            }
            sections
                .entry(current.clone())
                .or_default()
                .insert(key.to_owned(), value.trim().to_owned());
        }
        Ok(Self {
            sections,
            path: path.to_owned(),
            hash: lsgc_core::metrics::content_hash(raw.as_bytes()),
        })
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    pub fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    /// Typed lookup; absent keys are `Ok(None)`, malformed values are usage
    /// errors naming the location.
    pub fn get<T>(&self, section: &str, key: &str) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.raw(section, key) {
            None => Ok(None),
            Some(s) => s.parse::<T>().map(Some).map_err(|e| {
                CliError::Usage(format!(
                    "{}: [{section}] {key} = {s:?}: {e}",
                    self.path.display()
                ))
            }),
        }
    }

    pub fn get_or<T>(&self, section: &str, key: &str, default: T) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.get(section, key)?.unwrap_or(default))
    }

    pub fn require<T>(&self, section: &str, key: &str) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.get(section, key)?.ok_or_else(|| {
            CliError::Usage(format!(
                "{}: missing required key [{section}] {key}",
                self.path.display()
            ))
        })
    }

    /// Comma-separated list value.
    pub fn list(&self, section: &str, key: &str) -> Option<Vec<String>> {
        self.raw(section, key).map(|s| {
            s.split(',')
                .map(|p| p.trim().to_owned())
                .filter(|p| !p.is_empty())
                .collect()
        })
    }
}
