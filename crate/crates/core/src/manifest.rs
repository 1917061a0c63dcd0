//! Run manifests: what a command was asked to do and what it read and wrote.
//!
//! The fingerprint covers everything that determines the artifacts (command,
//! config, seeds, input and output hashes). Timings and thread count are
//! recorded but left out, since neither changes a byte of output.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub tool_version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// Relative path to SHA-256 hex digest.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    /// Wall time per phase in seconds.
    pub timings: BTreeMap<String, f64>,
    pub threads: usize,
}

#[derive(Serialize)]
struct Fingerprinted<'a> {
    version: u32,
    command: &'a str,
    config: &'a serde_json::Value,
    seeds: &'a BTreeMap<String, u64>,
    inputs: &'a BTreeMap<String, String>,
    outputs: &'a BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new<C: Serialize>(command: &str, config: &C, seeds: BTreeMap<String, u64>, threads: usize) -> Result<Self> {
        Ok(RunManifest {
            version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            seeds,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            timings: BTreeMap::new(),
            threads,
        })
    }

    pub fn input_bytes(&mut self, name: &str, bytes: &[u8]) {
        self.inputs.insert(name.to_string(), sha256_hex(bytes));
    }

    pub fn output_bytes(&mut self, name: &str, bytes: &[u8]) {
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
    }

    /// Hashes `root/rel`, a file or a directory tree, as an input.
    pub fn input_path(&mut self, root: &Path, rel: &str) -> Result<()> {
        let h = hash_path(&root.join(rel))?;
        self.inputs.insert(rel.to_string(), h);
        Ok(())
    }

    pub fn output_path(&mut self, root: &Path, rel: &str) -> Result<()> {
        let h = hash_path(&root.join(rel))?;
        self.outputs.insert(rel.to_string(), h);
        Ok(())
    }

    pub fn time(&mut self, phase: &str, seconds: f64) {
        self.timings.insert(phase.to_string(), seconds);
    }

    pub fn fingerprint(&self) -> Result<String> {
        let f = Fingerprinted {
            version: self.version,
            command: &self.command,
            config: &self.config,
            seeds: &self.seeds,
            inputs: &self.inputs,
            outputs: &self.outputs,
        };
        Ok(sha256_hex(&serde_json::to_vec(&f)?))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: RunManifest = serde_json::from_slice(&std::fs::read(path)?)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::InvalidInput(format!(
                "{}: manifest version {} (expected {MANIFEST_VERSION})",
                path.display(),
                m.version
            )));
        }
        Ok(m)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a file, or of a directory as the sorted list of
/// (relative path, file digest) pairs.
pub fn hash_path(path: &Path) -> Result<String> {
    if path.is_file() {
        return Ok(sha256_hex(&std::fs::read(path)?));
    }
    if !path.is_dir() {
        return Err(Error::InvalidInput(format!("{} does not exist", path.display())));
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in &files {
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(sha256_hex(&std::fs::read(path.join(rel))?).as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("walked from root");
            let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            out.push(parts.join("/"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RunManifest {
        let seeds = [("data".to_string(), 1u64)].into_iter().collect();
        let mut m = RunManifest::new("gen-data", &serde_json::json!({"count": 3}), seeds, 1).unwrap();
        m.output_bytes("raw.json", b"abc");
        m
    }

    #[test]
    fn fingerprint_ignores_timings_and_threads() {
        let a = sample();
        let mut b = sample();
        b.time("total", 12.5);
        b.threads = 4;
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        b.output_bytes("raw.json", b"abd");
        assert_ne!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
    }

    #[test]
    fn known_digest_and_round_trip() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m/gen-data.json");
        let m = sample();
        m.save(&path).unwrap();
        assert_eq!(RunManifest::load(&path).unwrap(), m);
    }

    #[test]
    fn directory_hash_depends_on_names_and_contents() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        std::fs::create_dir_all(d.join("x/sub")).unwrap();
        std::fs::write(d.join("x/a"), b"1").unwrap();
        std::fs::write(d.join("x/sub/b"), b"2").unwrap();
        let h1 = hash_path(&d.join("x")).unwrap();
        assert_eq!(h1, hash_path(&d.join("x")).unwrap());
        std::fs::write(d.join("x/sub/b"), b"3").unwrap();
        assert_ne!(h1, hash_path(&d.join("x")).unwrap());
        assert!(hash_path(&d.join("missing")).is_err());
    }
}
