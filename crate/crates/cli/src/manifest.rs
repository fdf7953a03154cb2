//! Run manifests: enough to reproduce a run, and nothing that changes
//! between identical runs (no timestamps, no absolute paths added).

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult};

#[derive(Debug, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputRef {
    Builtin { name: String },
    File { path: String, sha256: String },
}

#[derive(Debug, Serialize)]
pub struct OutputRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<InputRef>,
    pub outputs: Vec<OutputRef>,
}

fn sha256(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

impl Manifest {
    pub fn new(command: &str, args: &[String]) -> Self {
        Manifest {
            tool: "trainsim",
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            args: args.to_vec(),
            seed: None,
            inputs: vec![],
            outputs: vec![],
        }
    }

    pub fn input_builtin(&mut self, name: &str) {
        self.inputs.push(InputRef::Builtin { name: name.into() });
    }

    pub fn input_file(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.push(InputRef::File {
            path: path.display().to_string(),
            sha256: sha256(bytes),
        });
    }

    /// Writes `text` to `path` and records it.
    pub fn write(&mut self, path: &Path, text: &str) -> CliResult<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)
                .map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
        }
        std::fs::write(path, text)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        self.outputs.push(OutputRef {
            path: path.display().to_string(),
            sha256: sha256(text.as_bytes()),
        });
        Ok(())
    }

    /// `<out>.manifest.json`.
    pub fn finish(self, out: &Path) -> CliResult<()> {
        let path = sibling(out, "manifest.json");
        let mut text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }
}

/// `<out>.<suffix>`, keeping the full original file name.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}
