//! `key = value` configuration files with `#` comments.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KvEntry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvFile {
    pub source: Option<PathBuf>,
    pub entries: Vec<KvEntry>,
}

impl KvFile {
    pub fn parse(text: &str, source: Option<&Path>) -> Result<Self> {
        let mut entries: Vec<KvEntry> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| {
                Error::load(
                    source.unwrap_or(Path::new("<config>")),
                    line,
                    "expected `key = value`",
                )
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::load(
                    source.unwrap_or(Path::new("<config>")),
                    line,
                    "empty key",
                ));
            }
            if let Some(prev) = entries.iter().find(|e| e.key == key) {
                return Err(Error::load(
                    source.unwrap_or(Path::new("<config>")),
                    line,
                    format!("duplicate key `{key}` (first set on line {})", prev.line),
                ));
            }
            entries.push(KvEntry {
                key,
                value: value.trim().to_string(),
                line,
            });
        }
        Ok(Self {
            source: source.map(Path::to_path_buf),
            entries,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, Some(path))
    }

    pub fn get(&self, key: &str) -> Option<&KvEntry> {
        self.entries.iter().find(|e| e.key == key)
    }

    pub fn error(&self, entry: &KvEntry, message: impl Display) -> Error {
        Error::load(
            self.source
                .clone()
                .unwrap_or_else(|| PathBuf::from("<config>")),
            entry.line,
            format!("`{}`: {message}", entry.key),
        )
    }

    pub fn unknown(&self, entry: &KvEntry) -> Error {
        self.error(entry, "unknown key")
    }

    pub fn value<T>(&self, entry: &KvEntry) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        entry
            .value
            .parse()
            .map_err(|e: T::Err| self.error(entry, format!("cannot parse `{}`: {e}", entry.value)))
    }

    pub fn list<T>(&self, entry: &KvEntry) -> Result<Vec<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        entry
            .value
            .split(',')
            .map(|item| {
                item.trim()
                    .parse()
                    .map_err(|e: T::Err| self.error(entry, format!("cannot parse `{item}`: {e}")))
            })
            .collect()
    }
}
