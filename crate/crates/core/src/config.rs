//! Flat `key = value` configuration text. Later assignments override
//! earlier ones, so command-line flags can be applied on top of a file.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses lines of `key = value`; blank lines and `#` comments are
    /// ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Self::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Parse(format!("line {}: empty key", n + 1)));
            }
            kv.set(k, v.trim());
        }
        Ok(kv)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::at(path))?;
        Self::parse(&text)
    }

    /// Sets or replaces `key`.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Parses `key` if present.
    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| Error::Config(format!("`{key} = {v}`: {e}")))
            })
            .transpose()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Overlays every entry of `other`.
    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in other.iter() {
            self.set(k, v);
        }
    }
}

impl fmt::Display for KeyValues {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_override_and_print() {
        let mut kv = KeyValues::parse("# run\nseed = 3\n\niterations=10 # short\nseed = 4\n").unwrap();
        assert_eq!(kv.get("seed"), Some("4"));
        assert_eq!(kv.parsed::<usize>("iterations").unwrap(), Some(10));
        kv.set("iterations", "20");
        assert_eq!(kv.to_string(), "seed = 4\niterations = 20\n");
        assert_eq!(KeyValues::parse(&kv.to_string()).unwrap(), kv);
    }

    #[test]
    fn malformed_lines_are_errors() {
        assert!(KeyValues::parse("seed 3").is_err());
        assert!(KeyValues::parse(" = 3").is_err());
        let kv = KeyValues::parse("seed = x").unwrap();
        assert!(kv.parsed::<u64>("seed").is_err());
        assert_eq!(kv.parsed::<u64>("missing").unwrap(), None);
    }
}
