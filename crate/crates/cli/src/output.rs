//! Atomic artifact writes and the run manifest.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "SPARSE_CHAOS_OUT";

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Writes `bytes` to a temporary file next to `path`, then renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

#[derive(Serialize)]
struct OutputEntry {
    file: String,
    sha256: String,
}

#[derive(Serialize)]
struct Versions {
    sparse_chaos_cli: &'static str,
    sparse_chaos_core: &'static str,
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    command: &'a str,
    config_hash: &'a str,
    master_seed: u64,
    versions: Versions,
    outputs: &'a [OutputEntry],
}

/// Collects the files of one subcommand run.
pub struct Artifacts {
    dir: PathBuf,
    command: String,
    outputs: Vec<OutputEntry>,
}

impl Artifacts {
    pub fn new(dir: PathBuf, command: &str) -> Self {
        Self {
            dir,
            command: command.into(),
            outputs: Vec::new(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        write_atomic(&path, bytes)?;
        self.outputs.push(OutputEntry {
            file: name.into(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    /// Writes `<command>.manifest.json` listing everything written so far.
    pub fn finish(self, config_hash: &str, master_seed: u64) -> Result<PathBuf, CliError> {
        let m = Manifest {
            schema_version: SCHEMA_VERSION,
            command: &self.command,
            config_hash,
            master_seed,
            versions: Versions {
                sparse_chaos_cli: env!("CARGO_PKG_VERSION"),
                sparse_chaos_core: sparse_chaos::VERSION,
            },
            outputs: &self.outputs,
        };
        let mut bytes = serde_json::to_vec_pretty(&m).map_err(|e| CliError::Io(e.to_string()))?;
        bytes.push(b'\n');
        let path = self.dir.join(format!("{}.manifest.json", self.command));
        write_atomic(&path, &bytes)?;
        Ok(path)
    }
}

/// Minimal CSV builder; fields are numbers or plain identifiers.
pub struct Csv {
    buf: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        let mut buf = header.join(",");
        buf.push('\n');
        Self { buf }
    }

    pub fn row<I: IntoIterator<Item = String>>(&mut self, fields: I) {
        let fields: Vec<String> = fields.into_iter().collect();
        self.buf.push_str(&fields.join(","));
        self.buf.push('\n');
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf.into_bytes()
    }
}
