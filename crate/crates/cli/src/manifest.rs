//! Run manifests and content digests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use tdm_core::{MetricsReport, TdmError};

use crate::CliResult;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn version_string() -> String {
    format!("tdm {}", env!("CARGO_PKG_VERSION"))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> TdmError {
    TdmError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    /// Input path as given on the command line to its SHA-256 digest.
    pub input_hashes: BTreeMap<String, String>,
    /// Output file name (relative to the output directory) to its digest.
    pub outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace_path: Option<String>,
    /// Command-specific results.
    pub details: serde_json::Value,
    pub runtime_seconds: f64,
}

/// Collects the files a command writes into its output directory.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    manifest: RunManifest,
}

impl OutputDir {
    pub fn create(root: &Path, command: &str, config: impl Serialize) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                version: version_string(),
                config: serde_json::to_value(config).map_err(TdmError::from)?,
                input_hashes: BTreeMap::new(),
                outputs: BTreeMap::new(),
                metrics: None,
                trace_path: None,
                details: serde_json::Value::Null,
                runtime_seconds: 0.0,
            },
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn manifest_mut(&mut self) -> &mut RunManifest {
        &mut self.manifest
    }

    pub fn add_input(&mut self, path: &Path) -> CliResult<()> {
        let digest = sha256_file(path)?;
        self.manifest.input_hashes.insert(path.display().to_string(), digest);
        Ok(())
    }

    /// Registers a file already written under the output directory.
    pub fn record(&mut self, name: &str) -> CliResult<()> {
        let digest = sha256_file(&self.path(name))?;
        self.manifest.outputs.insert(name.to_string(), digest);
        Ok(())
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> CliResult<()> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        self.record(name)
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(TdmError::from)?;
        text.push('\n');
        self.write_text(name, &text)
    }

    pub fn finish(self) -> CliResult<RunManifest> {
        let path = self.path(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&self.manifest).map_err(TdmError::from)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        Ok(self.manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_known_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("abc.txt");
        fs::write(&path, "abc").unwrap();
        assert_eq!(
            sha256_file(&path).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_lists_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(dir.path(), "demo", serde_json::json!({"k": 1})).unwrap();
        out.write_text("sub/a.csv", "1,2\n").unwrap();
        let m = out.finish().unwrap();
        assert!(m.outputs.contains_key("sub/a.csv"));
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(text.contains("\"command\": \"demo\""));
    }
}
