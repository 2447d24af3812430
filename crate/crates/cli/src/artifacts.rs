//! Workdir layout and the per-command `meta/<command>.json` records that make
//! re-runs no-ops and refuse stale or mixed-config inputs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;

/// A command's inputs are missing, stale or inconsistent. Exit code 3.
#[derive(Debug)]
pub struct Precondition(pub String);

impl fmt::Display for Precondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Precondition {}

/// Bad invocation or config. Exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// Command-line options that change the artifact.
    pub options: BTreeMap<String, String>,
    /// Predecessor name → digest of its outputs.
    pub inputs: BTreeMap<String, String>,
    /// Workdir-relative path → sha256.
    pub outputs: BTreeMap<String, String>,
}

impl Meta {
    /// One digest standing for every output file.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (path, sum) in &self.outputs {
            h.update(path.as_bytes());
            h.update([0]);
            h.update(sum.as_bytes());
            h.update([0]);
        }
        hex(&h.finalize())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub struct Workdir {
    root: PathBuf,
    config_hash: String,
    seed: u64,
}

impl Workdir {
    pub fn new(root: PathBuf, config_hash: String, seed: u64) -> Self {
        Self {
            root,
            config_hash,
            seed,
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn meta_path(&self, command: &str) -> PathBuf {
        self.root.join("meta").join(format!("{command}.json"))
    }

    pub fn read_meta(&self, command: &str) -> Result<Option<Meta>> {
        let p = self.meta_path(command);
        if !p.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        Ok(Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?))
    }

    fn outputs_intact(&self, meta: &Meta) -> Result<Option<String>> {
        for (rel, sum) in &meta.outputs {
            let p = self.path(rel);
            if !p.exists() {
                return Ok(Some(format!("{rel} is missing")));
            }
            if &sha256_file(&p)? != sum {
                return Ok(Some(format!("{rel} was modified")));
            }
        }
        Ok(None)
    }

    /// The predecessor's record, after checking it was produced under this
    /// config and its files are untouched.
    pub fn require(&self, command: &str) -> Result<Meta> {
        let meta = self
            .read_meta(command)?
            .ok_or_else(|| Precondition(format!("run {command} first")))?;
        if meta.config_hash != self.config_hash {
            return Err(Precondition(format!(
                "stale artifact: {command} ran with config {}, current config is {}; re-run {command}",
                short(&meta.config_hash),
                short(&self.config_hash)
            ))
            .into());
        }
        if let Some(problem) = self.outputs_intact(&meta)? {
            return Err(Precondition(format!("{problem}; re-run {command}")).into());
        }
        Ok(meta)
    }

    /// True when `command` already ran with this config, options and inputs
    /// and its outputs are unchanged.
    pub fn up_to_date(
        &self,
        command: &str,
        options: &BTreeMap<String, String>,
        inputs: &BTreeMap<String, String>,
    ) -> Result<bool> {
        let Some(meta) = self.read_meta(command)? else {
            return Ok(false);
        };
        Ok(meta.config_hash == self.config_hash
            && meta.seed == self.seed
            && &meta.options == options
            && &meta.inputs == inputs
            && self.outputs_intact(&meta)?.is_none())
    }

    pub fn record(
        &self,
        command: &str,
        options: BTreeMap<String, String>,
        inputs: BTreeMap<String, String>,
        outputs: &[String],
    ) -> Result<Meta> {
        let mut sums = BTreeMap::new();
        for rel in outputs {
            sums.insert(rel.clone(), sha256_file(&self.path(rel))?);
        }
        let meta = Meta {
            command: command.to_string(),
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            options,
            inputs,
            outputs: sums,
        };
        let p = self.meta_path(command);
        fs::create_dir_all(p.parent().expect("meta dir"))?;
        fs::write(&p, serde_json::to_string_pretty(&meta)? + "\n").with_context(|| format!("writing {}", p.display()))?;
        Ok(meta)
    }

    /// Drop a previous record before rewriting its outputs, so an interrupted
    /// run never leaves a record that vouches for half-written files.
    pub fn invalidate(&self, command: &str) -> Result<()> {
        let p = self.meta_path(command);
        if p.exists() {
            fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
        }
        Ok(())
    }
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn workdir(dir: &Path, hash: &str) -> Workdir {
        Workdir::new(dir.to_path_buf(), hash.into(), 1)
    }

    #[test]
    fn record_then_require_and_detect_changes() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        let w = workdir(dir, "aaaa");
        let err = w.require("build-vocab").unwrap_err();
        assert_eq!(err.to_string(), "run build-vocab first");
        fs::write(dir.join("vocab.json"), "{}").unwrap();
        let none = BTreeMap::new();
        let meta = w.record("build-vocab", none.clone(), none.clone(), &["vocab.json".into()]).unwrap();
        assert_eq!(w.require("build-vocab").unwrap(), meta);
        assert!(w.up_to_date("build-vocab", &none, &none).unwrap());
        let mut opts = BTreeMap::new();
        opts.insert("x".to_string(), "1".to_string());
        assert!(!w.up_to_date("build-vocab", &opts, &none).unwrap());

        let other = workdir(dir, "bbbb");
        let err = other.require("build-vocab").unwrap_err().to_string();
        assert!(err.starts_with("stale artifact"), "{err}");
        assert!(!other.up_to_date("build-vocab", &none, &none).unwrap());

        fs::write(dir.join("vocab.json"), "{ }").unwrap();
        assert!(w.require("build-vocab").unwrap_err().to_string().contains("modified"));
        assert!(!w.up_to_date("build-vocab", &none, &none).unwrap());
    }
}
