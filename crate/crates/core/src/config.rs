//! Plain-text `key=value` files used for plans, manifests and synthetic specs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed `key=value` pairs; `#` starts a comment line.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    path: PathBuf,
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, ln + 1, "expected `key=value`"))?;
            let k = k.trim().to_string();
            if entries.insert(k.clone(), (ln + 1, v.trim().to_string())).is_some() {
                return Err(Error::parse(path, ln + 1, format!("duplicate key `{k}`")));
            }
        }
        Ok(KeyValues {
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((ln, v)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::parse(&self.path, *ln, format!("bad value `{v}` for `{key}`"))),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| Error::parse(&self.path, 0, format!("missing key `{key}`")))
    }

    /// Comma-separated list value.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((_, v)) if v.is_empty() => Ok(Some(Vec::new())),
            Some((ln, v)) => v
                .split(',')
                .map(|w| {
                    w.trim()
                        .parse::<T>()
                        .map_err(|_| Error::parse(&self.path, *ln, format!("bad list item `{w}` for `{key}`")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Keys not in `known`, for reporting typos.
    pub fn unknown_keys<'k>(&'k self, known: &[&str]) -> Vec<&'k str> {
        self.entries
            .keys()
            .map(String::as_str)
            .filter(|k| !known.contains(k))
            .collect()
    }

    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.unknown_keys(known).first() {
            None => Ok(()),
            Some(k) => Err(Error::parse(&self.path, self.entries[*k].0, format!("unknown key `{k}`"))),
        }
    }
}

pub(crate) fn join_list<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_values_and_lists() {
        let kv = KeyValues::parse("# plan\nrank = 4\nlambda=0.5\ndims=3, 4,5\nempty=\n", Path::new("p")).unwrap();
        assert_eq!(kv.require::<usize>("rank").unwrap(), 4);
        assert_eq!(kv.get::<f64>("lambda").unwrap(), Some(0.5));
        assert_eq!(kv.get_list::<usize>("dims").unwrap(), Some(vec![3, 4, 5]));
        assert_eq!(kv.get_list::<usize>("empty").unwrap(), Some(vec![]));
        assert!(kv.get::<usize>("missing").unwrap().is_none());
        assert!(kv.require::<usize>("missing").is_err());
        assert!(kv.get::<usize>("lambda").is_err());
        assert!(kv.reject_unknown(&["rank", "lambda", "dims"]).is_err());
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(KeyValues::parse("rank 4\n", Path::new("p")).is_err());
        assert!(KeyValues::parse("a=1\na=2\n", Path::new("p")).is_err());
    }
}
