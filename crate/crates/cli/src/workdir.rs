//! Workdir layout, config resolution and the artifact registry.
//!
//! Every artifact a command writes is recorded in `artifacts.json` with its
//! digest and producer. Commands re-hash their inputs against that record
//! before use, so an artifact edited or replaced behind the pipeline's back
//! is refused.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use partfit_core::error::Error;
use partfit_core::manifest::{hash_path, RunManifest};
use partfit_core::pipeline::DeskConfig;
use serde::{Deserialize, Serialize};

pub const RAW: &str = "raw.json";
pub const DATASET: &str = "dataset";
pub const MODEL: &str = "model.ckpt";
pub const INDEX: &str = "index.bin";
pub const EVAL_TSV: &str = "eval/table.tsv";
pub const EVAL_TXT: &str = "eval/table.txt";
pub const METRICS: &str = "metrics.json";
pub const REPLAY: &str = "replay.json";
pub const SESSIONS: &str = "sessions";
pub const CONFIG: &str = "config.json";
const REGISTRY: &str = "artifacts.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Artifact {
    sha256: String,
    producer: String,
}

pub struct Workdir {
    pub root: PathBuf,
}

impl Workdir {
    pub fn open(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("creating workdir {}", root.display()))?;
        Ok(Workdir { root: root.to_path_buf() })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn registry(&self) -> Result<BTreeMap<String, Artifact>> {
        let p = self.path(REGISTRY);
        if !p.exists() {
            return Ok(BTreeMap::new());
        }
        let bytes = std::fs::read(&p)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::InvalidInput(format!("{}: {e}", p.display())).into())
    }

    /// Fails unless `rel` exists and matches the digest its producer
    /// recorded. Artifacts with no record are hashed and accepted.
    pub fn verify(&self, rel: &str) -> Result<String> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(Error::Usage(format!("{} is missing; run the step that produces it first", p.display())).into());
        }
        let found = hash_path(&p)?;
        match self.registry()?.get(rel) {
            Some(a) if a.sha256 != found => Err(anyhow::Error::new(Error::HashMismatch {
                expected: a.sha256.clone(),
                found,
            })
            .context(format!("{rel} changed since {} wrote it", a.producer))),
            Some(_) => Ok(found),
            None => {
                log::warn!("{rel} has no recorded digest; accepting it as is");
                Ok(found)
            }
        }
    }

    fn record(&self, rel: &str, sha256: &str, producer: &str) -> Result<()> {
        let mut reg = self.registry()?;
        reg.insert(
            rel.to_string(),
            Artifact {
                sha256: sha256.to_string(),
                producer: producer.to_string(),
            },
        );
        std::fs::write(self.path(REGISTRY), serde_json::to_string_pretty(&reg)? + "\n")?;
        Ok(())
    }
}

/// One command's manifest, filled in as it runs.
pub struct Run<'a> {
    wd: &'a Workdir,
    pub manifest: RunManifest,
    clock: Instant,
}

impl<'a> Run<'a> {
    pub fn start(wd: &'a Workdir, command: &str, cfg: &DeskConfig) -> Result<Self> {
        let manifest = RunManifest::new(command, cfg, cfg.seeds(), rayon::current_num_threads())?;
        Ok(Run {
            wd,
            manifest,
            clock: Instant::now(),
        })
    }

    pub fn input(&mut self, rel: &str) -> Result<PathBuf> {
        let h = self.wd.verify(rel)?;
        self.manifest.inputs.insert(rel.to_string(), h);
        Ok(self.wd.path(rel))
    }

    /// Hashes and registers an artifact the command has just written.
    pub fn output(&mut self, rel: &str) -> Result<()> {
        let h = hash_path(&self.wd.path(rel))?;
        self.wd.record(rel, &h, &self.manifest.command)?;
        self.manifest.outputs.insert(rel.to_string(), h);
        Ok(())
    }

    pub fn lap(&mut self, phase: &str) {
        self.manifest.time(phase, self.clock.elapsed().as_secs_f64());
        self.clock = Instant::now();
    }

    pub fn save(&self) -> Result<PathBuf> {
        let path = self.wd.path(&format!("manifests/{}.json", self.manifest.command));
        self.manifest.save(&path)?;
        Ok(path)
    }
}

/// Config precedence: `--config` file, else the workdir's saved config,
/// else defaults. `seed_flag` overrides whichever wins. Returns whether a
/// seed was given explicitly by any of those sources.
pub fn resolve_config(wd: &Workdir, file: Option<&Path>, seed_flag: Option<u64>) -> Result<(DeskConfig, bool)> {
    let (value, from_file) = match file {
        Some(p) => (read_config(p)?, true),
        None if wd.path(CONFIG).exists() => (read_config(&wd.path(CONFIG))?, true),
        None => (serde_json::Value::Object(Default::default()), false),
    };
    let has_seed = from_file && value.get("seed").is_some();
    let mut cfg: DeskConfig =
        serde_json::from_value(value).map_err(|e| Error::Config(format!("bad config: {e}")))?;
    if let Some(s) = seed_flag {
        cfg.seed = s;
    }
    Ok((cfg, has_seed || seed_flag.is_some()))
}

fn read_config(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value = match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str::<toml::Value>(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
            .and_then(|v| serde_json::to_value(v).map_err(Error::from))?,
        _ => serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
    };
    if !value.is_object() {
        return Err(Error::Config(format!("{}: expected a table of settings", path.display())).into());
    }
    Ok(value)
}

pub fn save_config(wd: &Workdir, cfg: &DeskConfig) -> Result<()> {
    std::fs::write(wd.path(CONFIG), serde_json::to_string_pretty(cfg)? + "\n")?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}
