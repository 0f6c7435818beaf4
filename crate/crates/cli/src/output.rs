use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Everything that determines a command's outputs, plus the hashes of what
/// it wrote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub options: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub artifacts: Vec<FileHash>,
}

impl Manifest {
    /// Short digest of the fields that determine the outputs.
    pub fn run_key(&self) -> CliResult<String> {
        let key = serde_json::to_vec(&(&self.command, &self.version, &self.config, &self.seeds, &self.options, &self.inputs))?;
        Ok(hex(&Sha256::digest(&key))[..12].to_string())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    Ok(hex(&Sha256::digest(fs::read(path)?)))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("walk stays under root").to_path_buf());
        }
    }
    Ok(())
}

/// Staging directory renamed to its final name on commit and removed if
/// dropped uncommitted.
pub struct OutputDir {
    final_path: PathBuf,
    staging: PathBuf,
    committed: bool,
}

impl OutputDir {
    pub fn create(final_path: PathBuf) -> CliResult<OutputDir> {
        if final_path.exists() {
            return Err(CliError::Usage(format!(
                "output directory {} already exists",
                final_path.display()
            )));
        }
        let name = final_path
            .file_name()
            .ok_or_else(|| CliError::Usage(format!("bad output directory {}", final_path.display())))?
            .to_string_lossy()
            .into_owned();
        let parent = match final_path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent)?;
        let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir(&staging)?;
        Ok(OutputDir {
            final_path,
            staging,
            committed: false,
        })
    }

    /// Path of `rel` inside the staging directory; parents are created.
    pub fn file(&self, rel: &str) -> CliResult<PathBuf> {
        let p = self.staging.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    pub fn write(&self, rel: &str, contents: impl AsRef<[u8]>) -> CliResult<()> {
        fs::write(self.file(rel)?, contents)?;
        Ok(())
    }

    /// Hashes every staged file into the manifest, writes it and moves the
    /// directory into place.
    pub fn commit(mut self, mut manifest: Manifest) -> CliResult<PathBuf> {
        let mut files = Vec::new();
        collect_files(&self.staging, &self.staging, &mut files)?;
        files.sort();
        manifest.artifacts = files
            .iter()
            .map(|rel| {
                Ok(FileHash {
                    path: rel.to_string_lossy().replace('\\', "/"),
                    sha256: sha256_file(&self.staging.join(rel))?,
                })
            })
            .collect::<CliResult<_>>()?;
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(self.staging.join(MANIFEST_FILE), text)?;
        fs::rename(&self.staging, &self.final_path)?;
        self.committed = true;
        Ok(self.final_path.clone())
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}
