//! Content-hashed artifacts and the append-only run manifest.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ablate_core::diffusion::sha256_hex;
use anyhow::Context as _;
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Self { path: path.display().to_string(), sha256: sha256_hex(&bytes) })
    }

    /// Whether the file still exists with the recorded content.
    pub fn is_intact(&self) -> bool {
        std::fs::read(&self.path).is_ok_and(|b| sha256_hex(&b) == self.sha256)
    }
}

/// Writes through a temporary sibling and renames, creating parent directories.
pub fn write_artifact(path: &Path, bytes: &[u8]) -> Result<Artifact> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(Artifact { path: path.display().to_string(), sha256: sha256_hex(bytes) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub command: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub wall_clock_s: f64,
    pub version: String,
}

/// Collects the inputs and outputs of one command.
pub struct Record {
    command: String,
    config_hash: String,
    config: serde_json::Value,
    inputs: Vec<Artifact>,
    outputs: Vec<Artifact>,
    start: Instant,
}

impl Record {
    pub fn start(command: &str, config: &impl Serialize) -> Self {
        let config = serde_json::to_value(config).expect("serializable");
        Self {
            command: command.into(),
            config_hash: ablate_core::diffusion::json_hash(&config),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            start: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(Artifact::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, a: Artifact) {
        self.outputs.push(a);
    }

    pub fn outputs(&self) -> &[Artifact] {
        &self.outputs
    }

    /// Appends one JSON line to `dir/manifest.jsonl`.
    pub fn finish(self, dir: &Path) -> Result<()> {
        let entry = Entry {
            command: self.command,
            config_hash: self.config_hash,
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_clock_s: self.start.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION").into(),
        };
        append(dir, &entry)
    }
}

pub fn append(dir: &Path, entry: &Entry) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(MANIFEST);
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut line = serde_json::to_string(entry).expect("serializable");
    line.push('\n');
    f.write_all(line.as_bytes()).with_context(|| format!("appending to {}", path.display()))?;
    Ok(())
}

/// Completion marker of a resumable stage: its key and the hashes of what it wrote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stamp {
    pub key: String,
    pub outputs: Vec<Artifact>,
}

impl Stamp {
    /// Whether the stamp at `path` has `key` and every output is intact.
    pub fn is_current(path: &Path, key: &str) -> bool {
        std::fs::read_to_string(path)
            .ok()
            .and_then(|s| serde_json::from_str::<Stamp>(&s).ok())
            .is_some_and(|s| s.key == key && s.outputs.iter().all(Artifact::is_intact))
    }

    pub fn write(path: &Path, key: &str, outputs: &[Artifact]) -> Result<()> {
        let s = Stamp { key: key.into(), outputs: outputs.to_vec() };
        write_artifact(path, serde_json::to_string_pretty(&s).expect("serializable").as_bytes())?;
        Ok(())
    }
}
