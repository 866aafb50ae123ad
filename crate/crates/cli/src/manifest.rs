//! The `manifest.txt` written into every output directory before a command
//! does any work.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use chrono::{DateTime, Utc};
use crossres::kv::{KvDoc, KvWriter};
use sha1::{Digest, Sha1};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    /// Resolved configuration, as `[section]` kv text.
    pub config: String,
    pub config_hash: String,
    pub started_unix: i64,
    /// Command-specific inputs such as dataset or checkpoint paths.
    pub inputs: Vec<(String, String)>,
}

/// Hash of `content` as `git hash-object` computes it for a blob.
pub fn git_blob_hash(content: &str) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content.as_bytes());
    hex::encode(h.finalize())
}

/// Seconds since the epoch; `SOURCE_DATE_EPOCH` pins it for reproducible
/// output trees.
fn now_unix() -> i64 {
    if let Some(v) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.trim().parse().ok()) {
        return v;
    }
    Utc::now().timestamp()
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, mut config: String, inputs: Vec<(String, String)>) -> Self {
        if !config.is_empty() && !config.ends_with('\n') {
            config.push('\n');
        }
        Self {
            command: command.to_string(),
            seed,
            config_hash: git_blob_hash(&config),
            config,
            started_unix: now_unix(),
            inputs,
        }
    }

    pub fn input(&self, key: &str) -> Option<&str> {
        self.inputs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let started = DateTime::<Utc>::from_timestamp(self.started_unix, 0)
            .map(|t| t.format("%Y-%m-%dT%H:%M:%SZ").to_string())
            .unwrap_or_default();
        let mut w = KvWriter::new();
        w.section("run")
            .kv("command", &self.command)
            .kv("seed", self.seed)
            .kv("config_hash", &self.config_hash)
            .kv("started_unix", self.started_unix)
            .kv("started_utc", started);
        if !self.inputs.is_empty() {
            w.section("inputs");
            for (k, v) in &self.inputs {
                w.kv(k, v);
            }
        }
        format!("{}\n{}", w.finish(), self.config)
    }

    /// Create `dir/manifest.txt`; an existing manifest is never replaced.
    pub fn write_new(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| format!("creating {}", path.display()))?;
        f.write_all(self.to_text().as_bytes())
            .with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let doc = KvDoc::parse(text)?;
        let mut run = doc.section("run");
        let field = |v: Option<String>, key: &str| v.with_context(|| format!("manifest lacks `{key}`"));
        let command = field(run.get("command")?, "command")?;
        let seed = run.get("seed")?.context("manifest lacks `seed`")?;
        let config_hash = field(run.get("config_hash")?, "config_hash")?;
        let started_unix = run.get("started_unix")?.context("manifest lacks `started_unix`")?;
        let _: Option<String> = run.get("started_utc")?;
        run.finish()?;

        // the config snapshot is everything after the [run]/[inputs] header
        let mut inputs = Vec::new();
        let mut config = String::new();
        let mut section = String::new();
        for line in text.lines() {
            let t = line.trim();
            if let Some(name) = t.strip_prefix('[').and_then(|n| n.strip_suffix(']')) {
                section = name.trim().to_string();
            }
            match section.as_str() {
                "run" => {}
                "inputs" => {
                    if let Some((k, v)) = t.split_once('=') {
                        inputs.push((k.trim().to_string(), v.trim().to_string()));
                    }
                }
                _ => {
                    config.push_str(line);
                    config.push('\n');
                }
            }
        }
        if git_blob_hash(&config) != config_hash {
            bail!("manifest config hash does not match its config snapshot");
        }
        Ok(Self {
            command,
            seed,
            config,
            config_hash,
            started_unix,
            inputs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git() {
        // `git hash-object /dev/null` and `printf 'hello\n' | git hash-object --stdin`
        assert_eq!(git_blob_hash(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
        assert_eq!(git_blob_hash("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
    }

    #[test]
    fn text_roundtrip() {
        let m = RunManifest {
            command: "train".into(),
            seed: 7,
            config: "[train]\niterations = 3\n".into(),
            config_hash: git_blob_hash("[train]\niterations = 3\n"),
            started_unix: 86_400,
            inputs: vec![("data".into(), "/tmp/d".into())],
        };
        let text = m.to_text();
        assert!(text.contains("started_utc = 1970-01-02T00:00:00Z"));
        assert_eq!(RunManifest::parse(&text).unwrap(), m);
    }

    #[test]
    fn second_write_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::new("report", 0, String::new(), vec![]);
        m.write_new(dir.path()).unwrap();
        assert!(m.write_new(dir.path()).is_err());
    }

    #[test]
    fn tampered_snapshot_is_detected() {
        let m = RunManifest::new("train", 1, "[train]\nseed = 1\n".into(), vec![]);
        let text = m.to_text().replace("[train]\nseed = 1", "[train]\nseed = 2");
        assert!(RunManifest::parse(&text).is_err());
    }
}
