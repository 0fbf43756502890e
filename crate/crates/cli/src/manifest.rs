use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use panoptic4d::synthworld::write_atomic;

use crate::config::RunConfig;
use crate::error::{io, CliError};

pub const FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub config: RunConfig,
    /// Hash over every input file, if the command reads a dataset.
    pub input_sha256: Option<String>,
    pub outputs: Vec<Artifact>,
    /// Wall-clock seconds per phase.
    pub timings: Vec<(String, f64)>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Every regular file under `root` except run manifests, sorted by relative
/// path.
pub fn list_files(root: &Path) -> Result<Vec<PathBuf>, CliError> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
        for entry in std::fs::read_dir(dir).map_err(|e| io(dir, e))? {
            let p = entry.map_err(|e| io(dir, e))?.path();
            if p.is_dir() {
                walk(&p, out)?;
            } else if p.file_name().is_some_and(|n| n != FILE) {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    if root.is_dir() {
        walk(root, &mut out)?;
    } else {
        out.push(root.to_path_buf());
    }
    out.sort();
    Ok(out)
}

/// SHA-256 over `(relative path, file hash)` of every file under `root`.
pub fn tree_hash(root: &Path) -> Result<String, CliError> {
    let mut h = Sha256::new();
    for p in list_files(root)? {
        let rel = p.strip_prefix(root).unwrap_or(&p);
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(sha256_file(&p)?.as_bytes());
        h.update([b'\n']);
    }
    Ok(hex(&h.finalize()))
}

pub struct Recorder {
    command: String,
    config: RunConfig,
    seed: u64,
    input: Option<String>,
    timings: Vec<(String, f64)>,
    phase: Option<(String, Instant)>,
}

impl Recorder {
    pub fn new(command: &str, config: &RunConfig, seed: u64) -> Self {
        Recorder { command: command.into(), config: config.clone(), seed, input: None, timings: Vec::new(), phase: None }
    }

    pub fn input(&mut self, hash: String) {
        self.input = Some(hash);
    }

    pub fn phase(&mut self, name: &str) {
        self.end_phase();
        self.phase = Some((name.into(), Instant::now()));
    }

    fn end_phase(&mut self) {
        if let Some((name, t0)) = self.phase.take() {
            self.timings.push((name, t0.elapsed().as_secs_f64()));
        }
    }

    /// Hash the outputs under `out` and write the manifest there atomically.
    pub fn finish(mut self, out: &Path) -> Result<RunManifest, CliError> {
        self.end_phase();
        let mut outputs = Vec::new();
        for p in list_files(out)? {
            let bytes = std::fs::metadata(&p).map_err(|e| io(&p, e))?.len();
            let rel = p.strip_prefix(out).unwrap_or(&p).to_string_lossy().into_owned();
            outputs.push(Artifact { path: rel, sha256: sha256_file(&p)?, bytes });
        }
        let manifest = RunManifest {
            command: self.command,
            code_version: env!("CARGO_PKG_VERSION").into(),
            config_sha256: hex(&Sha256::digest(self.config.to_json().as_bytes())),
            seed: self.seed,
            config: self.config,
            input_sha256: self.input,
            outputs,
            timings: self.timings,
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        write_atomic(&out.join(FILE), &json)?;
        Ok(manifest)
    }
}
