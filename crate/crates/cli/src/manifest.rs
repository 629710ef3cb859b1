use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ibev_core::numerics::checkpoint::write_atomic;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Failure;

#[derive(Clone, Debug, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Everything needed to reproduce one command's outputs.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub code_version: String,
    /// TOML snapshot of the effective configuration.
    pub config: Option<String>,
    pub seed: Option<u64>,
    pub threads: usize,
    pub deterministic: bool,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub started_unix_s: u64,
    pub wall_clock_s: f64,
    #[serde(skip)]
    clock: Option<Instant>,
}

pub fn sha256_file(path: &Path) -> Result<(String, u64), Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok((digest.iter().map(|b| format!("{b:02x}")).collect(), bytes.len() as u64))
}

fn files_under(path: &Path) -> Result<Vec<PathBuf>, Failure> {
    if path.is_dir() {
        let mut out = Vec::new();
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Failure::io(path, e))?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()
            .map_err(|e| Failure::io(path, e))?;
        entries.sort();
        for e in entries {
            out.extend(files_under(&e)?);
        }
        Ok(out)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

impl RunManifest {
    pub fn start(command: &str, threads: usize, deterministic: bool) -> Self {
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        RunManifest {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config: None,
            seed: None,
            threads,
            deterministic,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix_s: started,
            wall_clock_s: 0.0,
            clock: Some(Instant::now()),
        }
    }

    fn records(path: &Path) -> Result<Vec<FileRecord>, Failure> {
        files_under(path)?
            .into_iter()
            .map(|p| {
                let (sha256, bytes) = sha256_file(&p)?;
                Ok(FileRecord { path: p.display().to_string(), sha256, bytes })
            })
            .collect()
    }

    /// Records a file, or every file below a directory.
    pub fn input(&mut self, path: &Path) -> Result<(), Failure> {
        self.inputs.extend(Self::records(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<(), Failure> {
        self.outputs.extend(Self::records(path)?);
        Ok(())
    }

    /// Stamps the wall clock and writes `path` atomically.
    pub fn finish(mut self, path: &Path) -> Result<(), Failure> {
        self.wall_clock_s = self.clock.map_or(0.0, |c| c.elapsed().as_secs_f64());
        self.outputs.sort_by(|a, b| a.path.cmp(&b.path));
        self.outputs.dedup_by(|a, b| a.path == b.path);
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        write_atomic(path, text.as_bytes()).map_err(Failure::from)
    }
}
