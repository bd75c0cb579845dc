//! Run manifests and atomic artifact writes.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// First-line prefix of CSV outputs identifying the producing run.
pub const CSV_MANIFEST_PREFIX: &str = "# manifest_sha256=";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to a temporary file beside `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Everything that determines a run's outputs. Two runs with equal
/// manifests write identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub software_version: String,
    /// Hash of the effective settings (config file after flag overrides).
    pub config_sha256: Option<String>,
    /// Hash of the raw data file.
    pub data_sha256: Option<String>,
    pub knot_plan: Option<msnma::knots::KnotPlan>,
    pub seed: Option<u64>,
    /// Manifest hashes of the runs whose artifacts this run read.
    pub upstream: Vec<String>,
    /// Command-specific settings.
    pub settings: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            software_version: env!("CARGO_PKG_VERSION").into(),
            config_sha256: None,
            data_sha256: None,
            knot_plan: None,
            seed: None,
            upstream: vec![],
            settings: serde_json::Value::Null,
        }
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("manifest serializes"))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StoredManifest {
    pub manifest_sha256: String,
    pub manifest: RunManifest,
}

pub fn manifest_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("{key}.manifest.json"))
}

pub fn read_manifest(dir: &Path, key: &str) -> Result<Option<StoredManifest>> {
    let path = manifest_path(dir, key);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let stored: StoredManifest = serde_json::from_slice(&text).with_context(|| format!("parsing {}", path.display()))?;
    if stored.manifest.hash() != stored.manifest_sha256 {
        bail!("{} does not match its recorded hash", path.display());
    }
    Ok(Some(stored))
}

/// Output directory of one run. Files carry the manifest hash; the manifest
/// itself and wall-clock timing are written by [`RunOutput::finish`].
pub struct RunOutput {
    dir: PathBuf,
    key: String,
    manifest: RunManifest,
    hash: String,
    started: Instant,
    files: Vec<String>,
}

impl RunOutput {
    /// `key` names the manifest file (`<key>.manifest.json`); it defaults
    /// to the command name.
    pub fn new(dir: &Path, manifest: RunManifest, key: Option<&str>) -> Self {
        let hash = manifest.hash();
        let key = key.unwrap_or(&manifest.command).to_string();
        Self { dir: dir.to_path_buf(), key, manifest, hash, started: Instant::now(), files: vec![] }
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.dir.join(name), bytes)?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// CSV body preceded by a manifest comment line.
    pub fn write_csv(&mut self, name: &str, body: &[u8]) -> Result<()> {
        let mut bytes = format!("{CSV_MANIFEST_PREFIX}{}\n", self.hash).into_bytes();
        bytes.extend_from_slice(body);
        self.write(name, &bytes)
    }

    /// JSON object with a `manifest_sha256` field added.
    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut v = serde_json::to_value(value)?;
        match v.as_object_mut() {
            Some(obj) => {
                obj.insert("manifest_sha256".into(), self.hash.clone().into());
            }
            None => bail!("{name}: top-level JSON value must be an object"),
        }
        let mut bytes = serde_json::to_vec_pretty(&v)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    /// Plain text with a `#` manifest comment line.
    pub fn write_text(&mut self, name: &str, body: &str) -> Result<()> {
        self.write_csv(name, body.as_bytes())
    }

    pub fn finish(self) -> Result<String> {
        let command = self.manifest.command.clone();
        let key = self.key;
        let stored = StoredManifest { manifest_sha256: self.hash.clone(), manifest: self.manifest };
        let mut bytes = serde_json::to_vec_pretty(&stored)?;
        bytes.push(b'\n');
        write_atomic(&manifest_path(&self.dir, &key), &bytes)?;
        let timing = serde_json::json!({
            "manifest_sha256": self.hash,
            "command": command,
            "wall_seconds": self.started.elapsed().as_secs_f64(),
            "files": self.files,
        });
        write_atomic(
            &self.dir.join(format!("{key}.timing.json")),
            &serde_json::to_vec_pretty(&timing)?,
        )?;
        Ok(self.hash)
    }
}

/// Manifest hash recorded on the first line of a CSV output.
pub fn csv_manifest_hash(text: &str) -> Option<&str> {
    text.lines().next()?.strip_prefix(CSV_MANIFEST_PREFIX)
}
