use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Serialize)]
struct OutputFile {
    path: String,
    sha256: String,
}

/// Record of one invocation, written next to its outputs. Together with the
/// resolved configuration it is enough to regenerate every output file.
#[derive(Debug, Serialize)]
pub struct Manifest {
    command: String,
    args: Vec<String>,
    version: String,
    seed: Option<u64>,
    config_sha256: String,
    config: String,
    outputs: Vec<OutputFile>,
    #[serde(skip)]
    dir: PathBuf,
}

impl Manifest {
    pub fn new(command: &str, dir: &Path, config: &str, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_sha256: sha256_hex(config.as_bytes()),
            config: config.to_string(),
            outputs: Vec::new(),
            dir: dir.to_path_buf(),
        }
    }

    /// Writes `bytes` to `name` inside the output directory and records it.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> io::Result<PathBuf> {
        fs::create_dir_all(&self.dir)?;
        let path = self.dir.join(name);
        fs::write(&path, bytes)?;
        self.outputs.push(OutputFile {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    /// Records a file some other writer already placed in the directory.
    pub fn record(&mut self, name: &str) -> io::Result<()> {
        let bytes = fs::read(self.dir.join(name))?;
        self.outputs.push(OutputFile {
            path: name.to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn finish(self, file: &str) -> io::Result<()> {
        fs::create_dir_all(&self.dir)?;
        let text = toml::to_string(&self).map_err(io::Error::other)?;
        fs::write(self.dir.join(file), text)
    }
}
