use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
}

/// Record of one invocation: what was read, what was written and with which
/// settings. Contains nothing time- or machine-dependent, so identical runs
/// write identical manifests.
#[derive(Serialize)]
pub struct Manifest {
    tool: &'static str,
    version: &'static str,
    subcommand: &'static str,
    seed: Option<u64>,
    config: Value,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Io(format!("creating {}: {e}", parent.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
}

impl Manifest {
    pub fn new(subcommand: &'static str, seed: Option<u64>, config: Value) -> Self {
        Manifest {
            tool: "geolandmark",
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Takes over the inputs recorded by `other`.
    pub fn with_inputs_from(mut self, other: Manifest) -> Self {
        self.inputs = other.inputs;
        self
    }

    pub fn input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.push(FileEntry {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        });
    }

    /// Writes an output file and records it.
    pub fn output(&mut self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        write(path, bytes)?;
        self.outputs.push(FileEntry {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    /// Writes the manifest to `location` and returns its path.
    pub fn finish(self, location: &Path) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(&self).map_err(|e| CliError::Invalid(e.to_string()))?;
        text.push('\n');
        write(location, text.as_bytes())?;
        Ok(location.to_path_buf())
    }
}

/// `<dir>/manifest.json` for directory outputs.
pub fn for_dir(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

/// `<file>.manifest.json` next to a single-file output.
pub fn for_file(file: &Path) -> PathBuf {
    let mut name = file.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    file.with_file_name(name)
}
