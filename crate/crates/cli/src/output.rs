//! Output directory handling and the run manifest.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn sha256_hex(data: &[u8]) -> String {
    Sha256::digest(data).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
struct OutputFile {
    file: String,
    bytes: usize,
    sha256: String,
}

/// Provenance record written next to the outputs. Contains nothing that
/// varies between identical runs.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config_source: String,
    pub config_sha256: String,
    pub scenario_sha256: Option<String>,
    pub parallel: bool,
}

#[derive(Serialize)]
struct ManifestFile<'a> {
    #[serde(flatten)]
    run: &'a Manifest,
    outputs: &'a [OutputFile],
}

/// Files go to the output directory when one is set. Without one the
/// primary output goes to stdout and summaries to stderr.
pub struct Outputs {
    dir: Option<PathBuf>,
    written: Vec<OutputFile>,
}

impl Outputs {
    pub fn new(dir: Option<&Path>) -> Result<Self, CliError> {
        if let Some(d) = dir {
            fs::create_dir_all(d).map_err(|source| CliError::Output {
                path: d.display().to_string(),
                source,
            })?;
        }
        Ok(Outputs {
            dir: dir.map(Path::to_path_buf),
            written: Vec::new(),
        })
    }

    pub fn primary(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        if self.dir.is_some() {
            return self.file(name, contents);
        }
        io::stdout()
            .write_all(contents.as_bytes())
            .map_err(|source| CliError::Output {
                path: "<stdout>".into(),
                source,
            })
    }

    /// Written only when there is an output directory.
    pub fn secondary(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        if self.dir.is_some() {
            self.file(name, contents)?;
        }
        Ok(())
    }

    pub fn summary(&self, text: &str) {
        if self.dir.is_some() {
            print!("{text}");
        } else {
            eprint!("{text}");
        }
    }

    fn file(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.as_ref().expect("output directory").join(name);
        fs::write(&path, contents).map_err(|source| CliError::Output {
            path: path.display().to_string(),
            source,
        })?;
        log::info!("wrote {}", path.display());
        self.written.push(OutputFile {
            file: name.to_string(),
            bytes: contents.len(),
            sha256: sha256_hex(contents.as_bytes()),
        });
        Ok(())
    }

    pub fn finish(mut self, manifest: &Manifest) -> Result<(), CliError> {
        if self.dir.is_none() {
            return Ok(());
        }
        let outputs = std::mem::take(&mut self.written);
        let mut json = serde_json::to_string_pretty(&ManifestFile {
            run: manifest,
            outputs: &outputs,
        })
        .expect("manifest serializes");
        json.push('\n');
        self.file("manifest.json", &json)
    }
}
