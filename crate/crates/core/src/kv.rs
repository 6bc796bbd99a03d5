//! Flat `key = value` text with `#` comments.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed entries with the 1-based line each came from.
#[derive(Debug, Clone, Default)]
pub struct KvFile {
    entries: BTreeMap<String, (String, usize)>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {lineno}: expected `key = value`, got {line:?}")))?;
            let key = key.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::Config(format!("line {lineno}: invalid key {key:?}")));
            }
            if let Some((_, first)) = entries.insert(key.to_string(), (value.trim().to_string(), lineno)) {
                return Err(Error::Config(format!("line {lineno}: duplicate key {key:?} (first on line {first})")));
            }
        }
        Ok(Self { entries })
    }

    /// Remove and parse `key`, if present.
    pub fn take<V: FromStr>(&mut self, key: &str) -> Result<Option<V>>
    where
        V::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("line {line}: bad value {v:?} for {key}: {e}"))),
        }
    }

    /// Remove `key` and parse a comma-separated list.
    pub fn take_list<V: FromStr>(&mut self, key: &str) -> Result<Option<Vec<V>>>
    where
        V::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((v, line)) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|e| Error::Config(format!("line {line}: bad list item {s:?} for {key}: {e}"))))
                .collect::<Result<Vec<V>>>()
                .map(Some),
        }
    }

    /// Overwrite `slot` when `key` is present.
    pub fn set<V: FromStr>(&mut self, key: &str, slot: &mut V) -> Result<()>
    where
        V::Err: Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Fail on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.iter().min_by_key(|(_, (_, line))| *line) {
            None => Ok(()),
            Some((k, (_, line))) => Err(Error::Config(format!("line {line}: unknown key {k:?}"))),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Append `key = value` to `out`.
pub fn push(out: &mut String, key: &str, value: impl Display) {
    out.push_str(key);
    out.push_str(" = ");
    out.push_str(&value.to_string());
    out.push('\n');
}

pub fn join<V: Display>(items: &[V]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_reports_lines() {
        let mut kv = KvFile::parse("# header\na = 1\n\nb=x # trailing\nlist = 1, 2,3\n").unwrap();
        assert_eq!(kv.take::<u32>("a").unwrap(), Some(1));
        assert_eq!(kv.take::<String>("b").unwrap().as_deref(), Some("x"));
        assert_eq!(kv.take_list::<usize>("list").unwrap(), Some(vec![1, 2, 3]));
        assert!(kv.is_empty());
        let err = KvFile::parse("a = 1\nnot a pair\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let mut kv = KvFile::parse("a = 1\nb = oops\n").unwrap();
        assert!(kv.take::<u32>("b").unwrap_err().to_string().contains("line 2"));
        let kv = KvFile::parse("a = 1\nzzz = 2\n").unwrap();
        assert!(kv.finish().unwrap_err().to_string().contains("line 1"));
        assert!(KvFile::parse("a = 1\na = 2").unwrap_err().to_string().contains("duplicate"));
    }
}
