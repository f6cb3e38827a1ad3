//! Sectioned key-value configuration files.
//!
//! The pipeline's plain-text configs (dataset registry, pipeline config,
//! benchmark map) all share one format: `[section]` headers followed by
//! `key = value` lines. `#` starts a comment, blank lines are ignored.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    BadLine { line: usize, text: String },
    #[error("line {line}: `key = value` before any [section]")]
    KeyOutsideSection { line: usize },
    #[error("section [{0}] not found")]
    MissingSection(String),
    #[error("key `{key}` not found in section [{section}]")]
    MissingKey { section: String, key: String },
    #[error("key `{key}` in section [{section}]: {message}")]
    BadValue {
        section: String,
        key: String,
        message: String,
    },
}

/// Parsed configuration: ordered sections of ordered key-value pairs.
#[derive(Debug, Clone, Default)]
pub struct Conf {
    sections: Vec<(String, BTreeMap<String, String>)>,
}

impl Conf {
    pub fn parse(text: &str) -> Result<Self, ConfError> {
        let mut sections: Vec<(String, BTreeMap<String, String>)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                sections.push((name.trim().to_string(), BTreeMap::new()));
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfError::BadLine {
                line: idx + 1,
                text: line.to_string(),
            })?;
            let section = sections
                .last_mut()
                .ok_or(ConfError::KeyOutsideSection { line: idx + 1 })?;
            section
                .1
                .insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Self { sections })
    }

    pub fn load(path: &Path) -> Result<Self, ConfError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(name, _)| name.as_str())
    }

    pub fn section(&self, name: &str) -> Option<&BTreeMap<String, String>> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, kv)| kv)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.section(section)
            .and_then(|kv| kv.get(key))
            .map(|s| s.as_str())
    }

    pub fn require(&self, section: &str, key: &str) -> Result<&str, ConfError> {
        if self.section(section).is_none() {
            return Err(ConfError::MissingSection(section.to_string()));
        }
        self.get(section, key).ok_or_else(|| ConfError::MissingKey {
            section: section.to_string(),
            key: key.to_string(),
        })
    }

    pub fn parse_value<T: std::str::FromStr>(
        &self,
        section: &str,
        key: &str,
    ) -> Result<T, ConfError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.require(section, key)?;
        raw.parse().map_err(|e: T::Err| ConfError::BadValue {
            section: section.to_string(),
            key: key.to_string(),
            message: format!("{e}"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let text = "# registry\n[polaris]\nsource = human\nmax = 1.0\n\n[lave]\nsource = human\n";
        let conf = Conf::parse(text).unwrap();
        assert_eq!(conf.section_names().collect::<Vec<_>>(), ["polaris", "lave"]);
        assert_eq!(conf.get("polaris", "source"), Some("human"));
        let max: f64 = conf.parse_value("polaris", "max").unwrap();
        assert_eq!(max, 1.0);
    }

    #[test]
    fn rejects_key_outside_section() {
        let err = Conf::parse("a = b\n").unwrap_err();
        assert!(matches!(err, ConfError::KeyOutsideSection { line: 1 }));
    }

    #[test]
    fn rejects_bare_line() {
        let err = Conf::parse("[s]\nnot a pair\n").unwrap_err();
        assert!(matches!(err, ConfError::BadLine { line: 2, .. }));
    }

    #[test]
    fn missing_key_is_structured() {
        let conf = Conf::parse("[s]\na = 1\n").unwrap();
        assert!(matches!(
            conf.require("s", "b"),
            Err(ConfError::MissingKey { .. })
        ));
        assert!(matches!(
            conf.require("t", "a"),
            Err(ConfError::MissingSection(_))
        ));
    }
}
