//! Flat `key = value` configuration text with optional `[section]` headers.
//!
//! Blank lines and `#` comments are ignored. Keys that appear before any
//! header belong to the unnamed section `""`. Every consumer reads its keys
//! through a [`Section`] reader, which rejects keys it did not consume.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvDoc {
    sections: Vec<(String, Vec<Entry>)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Entry {
    key: String,
    value: String,
    line: usize,
}

impl KvDoc {
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = KvDoc::default();
        let mut current = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {}: malformed section header", i + 1)))?;
                current = name.trim().to_string();
                if doc.sections.iter().any(|(s, _)| *s == current) {
                    return Err(Error::Config(format!("line {}: duplicate section [{current}]", i + 1)));
                }
                doc.sections.push((current.clone(), Vec::new()));
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            let entry = Entry {
                key,
                value: value.trim().to_string(),
                line: i + 1,
            };
            match doc.sections.iter_mut().find(|(s, _)| *s == current) {
                Some((_, entries)) => {
                    if entries.iter().any(|e| e.key == entry.key) {
                        return Err(Error::Config(format!("line {}: duplicate key `{}`", entry.line, entry.key)));
                    }
                    entries.push(entry);
                }
                None => doc.sections.push((current.clone(), vec![entry])),
            }
        }
        Ok(doc)
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(s, _)| s.as_str())
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.sections.iter().any(|(s, _)| s == name)
    }

    /// Reader over one section; an absent section reads as empty.
    pub fn section(&self, name: &str) -> Section<'_> {
        let entries = self
            .sections
            .iter()
            .find(|(s, _)| s == name)
            .map(|(_, e)| e.as_slice())
            .unwrap_or(&[]);
        Section {
            name: name.to_string(),
            entries,
            used: BTreeSet::new(),
        }
    }

    /// Fail on any section outside `allowed`.
    pub fn expect_sections(&self, allowed: &[&str]) -> Result<()> {
        for (s, entries) in &self.sections {
            if !allowed.contains(&s.as_str()) && !(s.is_empty() && entries.is_empty()) {
                let shown = if s.is_empty() { "<top level>".to_string() } else { format!("[{s}]") };
                return Err(Error::Config(format!("unknown section {shown}")));
            }
        }
        Ok(())
    }
}

pub struct Section<'a> {
    name: String,
    entries: &'a [Entry],
    used: BTreeSet<&'a str>,
}

impl<'a> Section<'a> {
    fn raw(&mut self, key: &str) -> Option<&'a Entry> {
        let e = self.entries.iter().find(|e| e.key == key)?;
        self.used.insert(e.key.as_str());
        Some(e)
    }

    pub fn get<V: FromStr>(&mut self, key: &str) -> Result<Option<V>>
    where
        V::Err: Display,
    {
        let section = self.name.clone();
        match self.raw(key) {
            None => Ok(None),
            Some(e) => e.value.parse().map(Some).map_err(|err| {
                Error::Config(format!("line {} [{section}] {key} = {}: {err}", e.line, e.value))
            }),
        }
    }

    pub fn get_or<V: FromStr>(&mut self, key: &str, default: V) -> Result<V>
    where
        V::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list; `{}`/`[]` brackets are accepted and ignored.
    pub fn get_list<V: FromStr>(&mut self, key: &str) -> Result<Option<Vec<V>>>
    where
        V::Err: Display,
    {
        let section = self.name.clone();
        let Some(e) = self.raw(key) else { return Ok(None) };
        let inner = e.value.trim_matches(|c| matches!(c, '{' | '}' | '[' | ']'));
        inner
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|err| Error::Config(format!("line {} [{section}] {key}: `{s}`: {err}", e.line)))
            })
            .collect::<Result<Vec<V>>>()
            .map(Some)
    }

    /// Fail if any key was not read.
    pub fn finish(self) -> Result<()> {
        for e in self.entries {
            if !self.used.contains(e.key.as_str()) {
                return Err(Error::Config(format!(
                    "line {}: unknown key `{}` in [{}]",
                    e.line, e.key, self.name
                )));
            }
        }
        Ok(())
    }
}

/// Accumulates `key = value` lines under section headers.
#[derive(Default)]
pub struct KvWriter {
    out: String,
}

impl KvWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn section(&mut self, name: &str) -> &mut Self {
        if !self.out.is_empty() {
            self.out.push('\n');
        }
        self.out.push_str(&format!("[{name}]\n"));
        self
    }

    pub fn kv(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.out.push_str(&format!("{key} = {value}\n"));
        self
    }

    pub fn list<V: Display>(&mut self, key: &str, values: &[V]) -> &mut Self {
        let joined: Vec<String> = values.iter().map(ToString::to_string).collect();
        self.kv(key, joined.join(", "))
    }

    pub fn finish(&self) -> String {
        self.out.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_lists_and_comments() {
        let doc = KvDoc::parse("# header\n[data]\nheight = 64\nseen_rates = {2, 3, 4}\n\n[train]\nlr = 1e-3 # inline\n")
            .unwrap();
        let mut data = doc.section("data");
        assert_eq!(data.get::<usize>("height").unwrap(), Some(64));
        assert_eq!(data.get_list::<u32>("seen_rates").unwrap(), Some(vec![2, 3, 4]));
        data.finish().unwrap();
        let mut train = doc.section("train");
        assert_eq!(train.get::<f64>("lr").unwrap(), Some(1e-3));
        train.finish().unwrap();
    }

    #[test]
    fn unknown_keys_are_fatal() {
        let doc = KvDoc::parse("[data]\nheigth = 64\n").unwrap();
        let mut s = doc.section("data");
        assert_eq!(s.get::<usize>("height").unwrap(), None);
        let err = s.finish().unwrap_err().to_string();
        assert!(err.contains("heigth"), "{err}");
    }

    #[test]
    fn unknown_sections_and_duplicates_are_fatal() {
        assert!(KvDoc::parse("[a]\nx=1\nx=2\n").is_err());
        let doc = KvDoc::parse("[bogus]\nx = 1\n").unwrap();
        assert!(doc.expect_sections(&["data"]).is_err());
        assert!(KvDoc::parse("no equals sign\n").is_err());
    }

    #[test]
    fn bad_value_reports_line() {
        let doc = KvDoc::parse("[data]\n\nheight = tall\n").unwrap();
        let err = doc.section("data").get::<usize>("height").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }
}
