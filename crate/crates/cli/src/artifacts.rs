// SPDX-License-Identifier: MIT OR Apache-2.0

//! Artifact bookkeeping. Every file a subcommand writes gets a
//! `<file>.prov.json` sidecar holding the config, input hashes and seed,
//! and every invocation leaves a `run-manifest.json` in the output
//! directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sublab_core::{Error, Result};

use crate::config::RunConfig;

pub const MANIFEST_NAME: &str = "run-manifest.json";
const SIDECAR_SUFFIX: &str = ".prov.json";

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(SIDECAR_SUFFIX);
    PathBuf::from(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub artifact_hash: String,
    pub subcommand: String,
    pub config_hash: String,
    pub seed: u64,
    /// Input path → SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    /// Canonical TOML of the run configuration.
    pub config: String,
}

impl Provenance {
    pub fn load(artifact: &Path) -> Result<Option<Self>> {
        let p = sidecar_path(artifact);
        if !p.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::format("provenance sidecar", e.to_string()))
    }
}

/// Hashes `path` and, when a sidecar exists, checks that the file is the
/// one it describes.
pub fn verify_input(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::InvalidInput(format!(
            "input artifact {} does not exist",
            path.display()
        )));
    }
    let hash = file_hash(path)?;
    if let Some(p) = Provenance::load(path)? {
        if p.artifact_hash != hash {
            return Err(Error::Provenance(format!(
                "{} has hash {hash}, its sidecar records {}",
                path.display(),
                p.artifact_hash
            )));
        }
    }
    Ok(hash)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Timings {
    pub elapsed_ms: u128,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub args: Vec<String>,
    pub config_hash: String,
    pub config: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub timings: Timings,
    pub exit_status: i32,
    pub error: Option<serde_json::Value>,
}

/// Book-keeping for one subcommand invocation.
pub struct Run {
    pub cfg: RunConfig,
    pub subcommand: String,
    pub args: Vec<String>,
    config_hash: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    started: Instant,
}

impl Run {
    pub fn new(cfg: RunConfig, subcommand: &str, args: Vec<String>) -> Self {
        Run {
            config_hash: cfg.hash(),
            cfg,
            subcommand: subcommand.to_string(),
            args,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            started: Instant::now(),
        }
    }

    pub fn out_dir(&self) -> &Path {
        &self.cfg.out_dir
    }

    /// Default location of an artifact inside the output directory.
    pub fn default_path(&self, rel: &str) -> PathBuf {
        self.cfg.out_dir.join(rel)
    }

    /// Registers and verifies an input artifact, returning its hash.
    pub fn input(&mut self, path: &Path) -> Result<String> {
        let hash = verify_input(path)?;
        self.inputs.insert(path.display().to_string(), hash.clone());
        Ok(hash)
    }

    /// Writes an artifact through `write`, then records its hash and
    /// sidecar.
    pub fn output(&mut self, path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<String> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write(path)?;
        let hash = file_hash(path)?;
        let prov = Provenance {
            artifact_hash: hash.clone(),
            subcommand: self.subcommand.clone(),
            config_hash: self.config_hash.clone(),
            seed: self.cfg.seed,
            inputs: self.inputs.clone(),
            config: self.cfg.to_toml(),
        };
        let side = sidecar_path(path);
        let text = serde_json::to_string_pretty(&prov).expect("provenance serializes") + "\n";
        fs::write(&side, text).map_err(|e| Error::io(&side, e))?;
        self.outputs.insert(path.display().to_string(), hash.clone());
        Ok(hash)
    }

    /// Writes `run-manifest.json` for this invocation.
    pub fn finish(&self, exit_status: i32, error: Option<serde_json::Value>) -> Result<()> {
        let manifest = RunManifest {
            subcommand: self.subcommand.clone(),
            args: self.args.clone(),
            config_hash: self.config_hash.clone(),
            config: self.cfg.to_toml(),
            seed: self.cfg.seed,
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            timings: Timings {
                elapsed_ms: self.started.elapsed().as_millis(),
            },
            exit_status,
            error,
        };
        let dir = &self.cfg.out_dir;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            out_dir: dir.path().to_path_buf(),
            ..RunConfig::default()
        };
        let mut run = Run::new(cfg, "test", vec![]);
        let p = dir.path().join("a/b.txt");
        let h = run
            .output(&p, |p| fs::write(p, "hello").map_err(|e| Error::io(p, e)))
            .unwrap();
        assert_eq!(verify_input(&p).unwrap(), h);
        let prov = Provenance::load(&p).unwrap().unwrap();
        assert_eq!(prov.config_hash, RunConfig {
            out_dir: dir.path().to_path_buf(),
            ..RunConfig::default()
        }
        .hash());
        fs::write(&p, "changed").unwrap();
        assert!(matches!(verify_input(&p), Err(Error::Provenance(_))));
        run.finish(0, None).unwrap();
        assert!(dir.path().join(MANIFEST_NAME).exists());
    }

    #[test]
    fn missing_input() {
        assert!(matches!(
            verify_input(Path::new("/nonexistent/x")),
            Err(Error::InvalidInput(_))
        ));
    }
}
