//! Stage output directories and their manifests.
//!
//! Each stage writes `<out>/<stage>/manifest.txt`. The manifest is a valid
//! config file (the config echo) preceded by comment lines that record the
//! command and the SHA-256 of every input and output artifact, so it can be
//! passed back through `--config` to reproduce the run.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::Result;

pub const MANIFEST: &str = "manifest.txt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct StageWriter {
    dir: PathBuf,
    command: String,
    inputs: Vec<(String, String)>,
    outputs: Vec<(String, String)>,
    prepared: bool,
}

impl StageWriter {
    /// Targets `<out>/<stage>`. Nothing touches the disk until the first
    /// write, which discards checkpoints of a previous run of the stage.
    pub fn create(out: &Path, stage: &str, command: &str) -> StageWriter {
        StageWriter { dir: out.join(stage), command: command.to_string(), inputs: Vec::new(), outputs: Vec::new(), prepared: false }
    }

    fn prepare(&mut self) -> Result<()> {
        if !self.prepared {
            let ckpts = self.dir.join(CHECKPOINT_DIR);
            if ckpts.is_dir() {
                fs::remove_dir_all(&ckpts)?;
            }
            fs::create_dir_all(&self.dir)?;
            self.prepared = true;
        }
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Reads an input artifact and records its digest.
    pub fn input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path)?;
        self.inputs.push((path.display().to_string(), sha256_hex(&bytes)));
        Ok(bytes)
    }

    /// Writes `bytes` to `<stage>/<rel>` and records its digest.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        self.prepare()?;
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.outputs.push((rel.to_string(), sha256_hex(bytes)));
        Ok(path)
    }

    pub fn finish(mut self, cfg: &ExperimentConfig) -> Result<PathBuf> {
        self.prepare()?;
        let echo = cfg.echo();
        let mut text = String::new();
        text.push_str(&format!("# command: {}\n", self.command));
        text.push_str(&format!("# config_sha256: {}\n", sha256_hex(echo.as_bytes())));
        for (path, hash) in &self.inputs {
            text.push_str(&format!("# input {hash} {path}\n"));
        }
        for (rel, hash) in &self.outputs {
            text.push_str(&format!("# output {hash} {rel}\n"));
        }
        text.push_str(&echo);
        let path = self.dir.join(MANIFEST);
        fs::write(&path, text)?;
        Ok(path)
    }
}

/// Output artifacts listed in a manifest as `(relative path, sha256)`.
pub fn manifest_outputs(manifest: &str) -> Vec<(String, String)> {
    manifest
        .lines()
        .filter_map(|l| l.strip_prefix("# output "))
        .filter_map(|l| l.split_once(' ').map(|(h, p)| (p.to_string(), h.to_string())))
        .collect()
}

/// Checks every output digest listed in `<dir>/manifest.txt` against the files.
pub fn verify_stage(dir: &Path) -> Result<bool> {
    let manifest = fs::read_to_string(dir.join(MANIFEST))?;
    for (rel, hash) in manifest_outputs(&manifest) {
        if sha256_hex(&fs::read(dir.join(&rel))?) != hash {
            return Ok(false);
        }
    }
    Ok(true)
}
