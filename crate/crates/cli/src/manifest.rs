use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliResult;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Serialize)]
pub struct FileRecord {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Serialize)]
struct Versions {
    orbit_recover: &'static str,
    orbit_core: &'static str,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    config: &'a Value,
    versions: Versions,
    threads: usize,
    wall_time_s: f64,
    inputs: Vec<FileRecord>,
    outputs: Vec<FileRecord>,
}

pub fn sha256_file(path: &Path) -> CliResult<FileRecord> {
    let bytes = fs::read(path)?;
    Ok(FileRecord { path: path.display().to_string(), bytes: bytes.len() as u64, sha256: hex::encode(Sha256::digest(&bytes)) })
}

/// Collects the files a command reads and writes, then writes the manifest.
pub struct RunRecorder {
    out: PathBuf,
    started: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<String>,
}

impl RunRecorder {
    pub fn new(out: &Path) -> CliResult<Self> {
        fs::create_dir_all(out)?;
        Ok(Self { out: out.to_path_buf(), started: Instant::now(), inputs: Vec::new(), outputs: Vec::new() })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    /// Writes `bytes` to `name` inside the output directory.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.out.join(name);
        fs::write(&path, bytes)?;
        self.output(name);
        Ok(path)
    }

    /// Registers a file that a library call already wrote.
    pub fn output(&mut self, name: &str) {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
    }

    /// Registers every existing file named `<stem>.<suffix>` for the suffixes.
    pub fn outputs_with_stem(&mut self, stem: &str, suffixes: &[&str]) {
        for s in suffixes {
            let name = format!("{stem}.{s}");
            if self.out.join(&name).is_file() {
                self.output(&name);
            }
        }
    }

    pub fn finish(self, command: &str, seed: u64, config: &Value) -> CliResult<PathBuf> {
        let wall = self.started.elapsed().as_secs_f64();
        let inputs = self.inputs.iter().map(|p| sha256_file(p)).collect::<CliResult<Vec<_>>>()?;
        let mut outputs = Vec::with_capacity(self.outputs.len());
        for name in &self.outputs {
            let mut rec = sha256_file(&self.out.join(name))?;
            rec.path = name.clone();
            outputs.push(rec);
        }
        let manifest = Manifest {
            command,
            seed,
            config,
            versions: Versions { orbit_recover: env!("CARGO_PKG_VERSION"), orbit_core: orbit_core::VERSION },
            threads: rayon::current_num_threads(),
            wall_time_s: wall,
            inputs,
            outputs,
        };
        let path = self.out.join(MANIFEST_NAME);
        fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
        Ok(path)
    }
}
