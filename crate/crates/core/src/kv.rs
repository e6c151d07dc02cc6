//! Flat `key = value` text dialect: one pair per line, `#` starts a comment,
//! blank lines ignored, keys unique.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed pairs with the line each came from.
#[derive(Clone, Debug, Default)]
pub struct KvFile {
    pub origin: String,
    entries: BTreeMap<String, (String, usize)>,
}

impl KvFile {
    pub fn parse(origin: &str, text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: origin.to_owned(),
                    line: line_no,
                    detail: format!("expected `key = value`, got {line:?}"),
                });
            };
            let key = k.trim().to_owned();
            if key.is_empty() {
                return Err(Error::Parse {
                    path: origin.to_owned(),
                    line: line_no,
                    detail: "empty key".into(),
                });
            }
            if entries.insert(key.clone(), (v.trim().to_owned(), line_no)).is_some() {
                return Err(Error::Parse {
                    path: origin.to_owned(),
                    line: line_no,
                    detail: format!("duplicate key {key}"),
                });
            }
        }
        Ok(KvFile {
            origin: origin.to_owned(),
            entries,
        })
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    fn err(&self, key: &str, detail: String) -> Error {
        Error::Parse {
            path: self.origin.clone(),
            line: self.entries.get(key).map_or(0, |(_, l)| *l),
            detail,
        }
    }

    /// Parses `key` when present, leaving `slot` untouched otherwise.
    pub fn get_into<V>(&self, key: &str, slot: &mut V) -> Result<()>
    where
        V: FromStr,
        V::Err: Display,
    {
        if let Some(v) = self.raw(key) {
            *slot = v
                .parse()
                .map_err(|e| self.err(key, format!("bad value {v:?} for {key}: {e}")))?;
        }
        Ok(())
    }

    /// Comma-separated list.
    pub fn get_list_into<V>(&self, key: &str, slot: &mut Vec<V>) -> Result<()>
    where
        V: FromStr,
        V::Err: Display,
    {
        if let Some(v) = self.raw(key) {
            *slot = v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|e| self.err(key, format!("bad list item {p:?} for {key}: {e}")))
                })
                .collect::<Result<_>>()?;
        }
        Ok(())
    }

    /// Fails on the first key not in `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(self.err(k, format!("unknown key {k}"))),
            None => Ok(()),
        }
    }
}

pub fn join_list<V: Display>(items: &[V]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}
