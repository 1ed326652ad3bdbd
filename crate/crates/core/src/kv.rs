//! Flat `key = value` configuration files. `#` starts a comment.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = k.trim().to_string();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", i + 1)));
            }
        }
        Ok(KeyValues { entries })
    }

    /// Errors on any key outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        match self.entries.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(Error::Config(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
            })
            .transpose()
    }

    /// Comma- or whitespace-separated numbers.
    pub fn list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.raw(key).map(|v| parse_list(key, v)).transpose()
    }

    /// Rows separated by `;`.
    pub fn matrix(&self, key: &str) -> Result<Option<Vec<Vec<f64>>>> {
        self.raw(key)
            .map(|v| v.split(';').map(|row| parse_list(key, row)).collect())
            .transpose()
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number `{s}` in `{key}`")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_values_lists_and_matrices() {
        let kv = KeyValues::parse("a = 3 # three\n\nb=0.5, 0.5\nm = 1 0; 0 1\n").unwrap();
        assert_eq!(kv.get::<usize>("a").unwrap(), Some(3));
        assert_eq!(kv.list("b").unwrap(), Some(vec![0.5, 0.5]));
        assert_eq!(kv.matrix("m").unwrap(), Some(vec![vec![1.0, 0.0], vec![0.0, 1.0]]));
        assert_eq!(kv.get::<usize>("missing").unwrap(), None);
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        let kv = KeyValues::parse("a = 1\nzzz = 2").unwrap();
        assert!(kv.check_keys(&["a"]).is_err());
        assert!(KeyValues::parse("a = 1\na = 2").is_err());
        assert!(KeyValues::parse("just words").is_err());
    }
}
