//! Staged, all-or-nothing output and provenance sidecars.
//!
//! Every artifact `X` gets a sidecar `X.prov.json`. Files are written to
//! temporaries in the destination directory and renamed into place only
//! after the whole command has succeeded.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const PROV_SUFFIX: &str = ".prov.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArtifactKind {
    Trace,
    Labels,
    Session,
    Windows,
    Thresholds,
    SorterModels,
    Events,
    SortEval,
    Confusion,
    DecoderModel,
    Split,
    Decoded,
    DecodeMetrics,
    SimCounters,
    OpCounts,
    Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub kind: ArtifactKind,
    /// The command's own seed, or the seed its inputs were made with.
    pub seed: Option<u64>,
    /// SHA-256 of the command's parameters, with paths left out.
    pub config_hash: String,
    /// File name to SHA-256 of every input.
    pub inputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn config_hash<T: Serialize>(params: &T) -> String {
    sha256_hex(&serde_json::to_vec(params).expect("parameters serialize"))
}

pub fn prov_path(artifact: &Path) -> PathBuf {
    let mut s: OsString = artifact.as_os_str().to_owned();
    s.push(PROV_SUFFIX);
    PathBuf::from(s)
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn read_provenance(artifact: &Path) -> Option<Provenance> {
    let raw = fs::read(prov_path(artifact)).ok()?;
    serde_json::from_slice(&raw).ok()
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Hash of a file, or of a directory's files in name order.
pub fn content_hash(path: &Path) -> Result<String, CliError> {
    if path.is_dir() {
        let mut h = Sha256::new();
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| CliError::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for p in entries {
            h.update(file_name(&p).as_bytes());
            h.update(read_file(&p)?);
        }
        Ok(hex::encode(h.finalize()))
    } else {
        Ok(sha256_hex(&read_file(path)?))
    }
}

/// Inputs of one command run: their hashes and the seed they carry.
#[derive(Debug, Default)]
pub struct Inputs {
    hashes: BTreeMap<String, String>,
    seed: Option<u64>,
}

impl Inputs {
    pub fn add(&mut self, path: &Path) -> Result<(), CliError> {
        self.hashes.insert(file_name(path), content_hash(path)?);
        if self.seed.is_none() {
            self.seed = read_provenance(path).and_then(|p| p.seed);
        }
        Ok(())
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }
}

enum Staged {
    File(PathBuf, Vec<u8>),
    Dir(PathBuf, Vec<(String, Vec<u8>)>),
}

/// Outputs collected by a command and committed together.
pub struct Outputs {
    command: String,
    config_hash: String,
    seed: Option<u64>,
    inputs: Inputs,
    staged: Vec<Staged>,
}

impl Outputs {
    pub fn new<T: Serialize>(command: &str, params: &T, seed: Option<u64>, inputs: Inputs) -> Self {
        Self {
            command: command.to_string(),
            config_hash: config_hash(params),
            seed: seed.or(inputs.seed),
            inputs,
            staged: Vec::new(),
        }
    }

    fn provenance(&self, kind: ArtifactKind) -> Vec<u8> {
        let p = Provenance {
            tool: "nsp".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command.clone(),
            kind,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            inputs: self.inputs.hashes.clone(),
        };
        serde_json::to_vec_pretty(&p).expect("provenance serializes")
    }

    pub fn file(&mut self, path: &Path, kind: ArtifactKind, bytes: Vec<u8>) {
        let prov = self.provenance(kind);
        self.staged.push(Staged::File(path.to_path_buf(), bytes));
        self.staged.push(Staged::File(prov_path(path), prov));
    }

    /// A file without its own sidecar (a session's JSON companion).
    pub fn companion(&mut self, path: &Path, bytes: Vec<u8>) {
        self.staged.push(Staged::File(path.to_path_buf(), bytes));
    }

    pub fn json<T: Serialize>(&mut self, path: &Path, kind: ArtifactKind, value: &T) {
        let mut bytes = serde_json::to_vec_pretty(value).expect("output serializes");
        bytes.push(b'\n');
        self.file(path, kind, bytes);
    }

    pub fn dir(&mut self, path: &Path, kind: ArtifactKind, files: Vec<(String, Vec<u8>)>) {
        let prov = self.provenance(kind);
        self.staged.push(Staged::Dir(path.to_path_buf(), files));
        self.staged.push(Staged::File(prov_path(path), prov));
    }

    /// Writes everything to temporaries first, then renames into place.
    pub fn commit(self) -> Result<(), CliError> {
        enum Ready {
            File(tempfile::NamedTempFile, PathBuf),
            Dir(tempfile::TempDir, PathBuf),
        }
        let parent_of = |p: &Path| -> PathBuf {
            match p.parent() {
                Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
                _ => PathBuf::from("."),
            }
        };
        let mut ready = Vec::new();
        for s in self.staged {
            match s {
                Staged::File(path, bytes) => {
                    let dir = parent_of(&path);
                    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| CliError::io(&dir, e))?;
                    tmp.write_all(&bytes).and_then(|_| tmp.flush()).map_err(|e| CliError::io(&path, e))?;
                    ready.push(Ready::File(tmp, path));
                }
                Staged::Dir(path, files) => {
                    let dir = parent_of(&path);
                    let tmp = tempfile::Builder::new()
                        .prefix(".nsp-")
                        .tempdir_in(&dir)
                        .map_err(|e| CliError::io(&dir, e))?;
                    for (name, bytes) in files {
                        let p = tmp.path().join(name);
                        fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))?;
                    }
                    ready.push(Ready::Dir(tmp, path));
                }
            }
        }
        for r in ready {
            match r {
                Ready::File(tmp, path) => {
                    tmp.persist(&path).map_err(|e| CliError::io(&path, e.error))?;
                }
                Ready::Dir(tmp, path) => {
                    if path.is_dir() {
                        fs::remove_dir_all(&path).map_err(|e| CliError::io(&path, e))?;
                    }
                    let kept = tmp.keep();
                    fs::rename(&kept, &path).map_err(|e| CliError::io(&path, e))?;
                }
            }
        }
        Ok(())
    }
}
