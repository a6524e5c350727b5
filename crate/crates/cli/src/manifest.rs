use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
}

/// Record of one command run: what went in, what settings were used and
/// what came out. Contains no timestamps, so identical runs write identical
/// manifests.
#[derive(Debug, Serialize)]
pub struct Manifest {
    command: String,
    version: String,
    parameters: BTreeMap<String, String>,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    failures: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn display_name(path: &Path) -> String {
    path.to_string_lossy().replace('\\', "/")
}

impl Manifest {
    pub fn new(command: &str, parameters: &BTreeMap<String, String>) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            parameters: parameters.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            failures: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push(FileEntry {
            path: display_name(path),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    /// Outputs are recorded by file name relative to the manifest.
    pub fn output(&mut self, path: &Path) -> Result<(), CliError> {
        let name = path.file_name().map(Path::new).unwrap_or(path);
        self.outputs.push(FileEntry {
            path: display_name(name),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn failure(&mut self, message: String) {
        self.failures.push(message);
    }

    pub fn write(&self, path: &Path) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        Ok(path.to_path_buf())
    }
}
