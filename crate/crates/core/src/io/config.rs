//! Line-oriented configuration files.
//!
//! ```text
//! # comment
//! [phantom]
//! n_frames = 64
//! angles = -9, -7, -5, -3, -1, 1, 3, 5, 7, 9
//! [phantom.vessel.0]
//! start = -12, 30
//! ```
//!
//! A `[section]` header prefixes the keys below it (`phantom.n_frames`);
//! keys may also be written dotted in full. Lists are comma separated.
//! Every key must be consumed by the reader, so typos surface as errors.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    value: String,
    line: usize,
}

#[derive(Debug, Default)]
pub struct ConfigDoc {
    entries: BTreeMap<String, Entry>,
    used: RefCell<BTreeSet<String>>,
}

impl ConfigDoc {
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = ConfigDoc::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or(Error::Parse {
                    line,
                    msg: "unterminated section header".into(),
                })?;
                let name = name.trim();
                if !valid_key(name) {
                    return Err(Error::Parse {
                        line,
                        msg: format!("bad section name '{name}'"),
                    });
                }
                section = name.to_string();
                continue;
            }
            let (k, v) = content.split_once('=').ok_or(Error::Parse {
                line,
                msg: format!("expected 'key = value', found '{content}'"),
            })?;
            let k = k.trim();
            if !valid_key(k) {
                return Err(Error::Parse {
                    line,
                    msg: format!("bad key '{k}'"),
                });
            }
            let key = if section.is_empty() {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            doc.insert(key, v.trim().to_string(), line)?;
        }
        Ok(doc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            Error::InvalidConfig(format!("cannot read config {}: {e}", path.as_ref().display()))
        })?;
        Self::parse(&text)
    }

    fn insert(&mut self, key: String, value: String, line: usize) -> Result<()> {
        if let Some(prev) = self.entries.get(&key) {
            return Err(Error::Parse {
                line,
                msg: format!("duplicate key '{key}' (first set on line {})", prev.line),
            });
        }
        self.entries.insert(key, Entry { value, line });
        Ok(())
    }

    /// Sets or replaces a key (command-line overrides).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !valid_key(key) {
            return Err(Error::InvalidConfig(format!("bad key '{key}'")));
        }
        self.entries.insert(
            key.to_string(),
            Entry {
                value: value.trim().to_string(),
                line: 0,
            },
        );
        Ok(())
    }

    /// Applies a `key=value` override string.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("override '{pair}' is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn raw(&self, key: &str) -> Option<&Entry> {
        let e = self.entries.get(key)?;
        self.used.borrow_mut().insert(key.to_string());
        Some(e)
    }

    fn bad(&self, key: &str, e: &Entry, what: &str) -> Error {
        Error::Parse {
            line: e.line,
            msg: format!("'{key}': cannot read '{}' as {what}", e.value),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(e) => e
                .value
                .parse::<T>()
                .map(Some)
                .map_err(|_| self.bad(key, e, std::any::type_name::<T>())),
        }
    }

    /// Overwrites `slot` when the key is present.
    pub fn read<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        match self.raw(key) {
            None => Ok(None),
            Some(e) => match e.value.as_str() {
                "true" | "yes" | "1" | "on" => Ok(Some(true)),
                "false" | "no" | "0" | "off" => Ok(Some(false)),
                _ => Err(self.bad(key, e, "bool")),
            },
        }
    }

    pub fn read_bool(&self, key: &str, slot: &mut bool) -> Result<()> {
        if let Some(v) = self.get_bool(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.raw(key) {
            None => Ok(None),
            Some(e) if e.value.is_empty() => Ok(Some(Vec::new())),
            Some(e) => e
                .value
                .split(',')
                .map(|s| s.trim().parse::<T>().map_err(|_| self.bad(key, e, "list")))
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Distinct child names directly under `prefix` (e.g. vessel indices
    /// under `phantom.vessel`), sorted.
    pub fn children(&self, prefix: &str) -> Vec<String> {
        let p = format!("{prefix}.");
        let set: BTreeSet<String> = self
            .entries
            .keys()
            .filter_map(|k| k.strip_prefix(&p))
            .filter_map(|rest| rest.split('.').next())
            .map(str::to_string)
            .collect();
        set.into_iter().collect()
    }

    /// Errors on the first key nobody read.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        match self.entries.iter().find(|(k, _)| !used.contains(*k)) {
            Some((k, e)) => Err(Error::Parse {
                line: e.line,
                msg: format!("unknown key '{k}'"),
            }),
            None => Ok(()),
        }
    }
}

fn valid_key(k: &str) -> bool {
    !k.is_empty()
        && k.split('.').all(|part| {
            !part.is_empty() && part.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        })
}
