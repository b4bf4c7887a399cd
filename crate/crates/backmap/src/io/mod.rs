//! Parsers, writers, configuration, and run bookkeeping.
//!
//! Submodules:
//! - [`pdb`]: fixed-column multi-model PDB reading and writing.
//! - [`mapping`]: the plain-text coarse-grain mapping format.
//! - [`checkpoint`]: JSON model checkpoints (named arrays plus shapes).
//! - [`config`]: the TOML run configuration schema.
//! - [`manifest`]: chain manifests and reproducibility manifests.
//!
//! Every writer in this module is atomic: content goes to a temporary
//! sibling file first and is renamed into place, so readers never observe
//! a half-written artifact.

pub mod checkpoint;
pub mod config;
pub mod manifest;
pub mod mapping;
pub mod pdb;

use std::fs;
use std::io::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::coarsen::CoarsenError;
use crate::cvae::CvaeError;
use crate::mol::MolError;
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{path}: {reason}")]
    BadContent { path: String, reason: String },
    #[error("writing a PDB needs at least one frame")]
    NoFrames,
    #[error("frame {frame} holds {actual} particles, topology has {expected}")]
    FrameMismatch {
        frame: usize,
        expected: usize,
        actual: usize,
    },
    #[error("config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Mol(#[from] MolError),
    #[error(transparent)]
    Coarsen(#[from] CoarsenError),
    #[error(transparent)]
    Cvae(#[from] CvaeError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

impl IoError {
    pub(crate) fn file(path: &Path, source: std::io::Error) -> Self {
        IoError::File {
            path: path.display().to_string(),
            source,
        }
    }

    fn parse(path: &Path, line: usize, reason: impl Into<String>) -> Self {
        IoError::Parse {
            path: path.display().to_string(),
            line,
            reason: reason.into(),
        }
    }

    fn content(path: &Path, reason: impl Into<String>) -> Self {
        IoError::BadContent {
            path: path.display().to_string(),
            reason: reason.into(),
        }
    }
}

/// Write `content` to `path` atomically: the bytes land in a temporary
/// sibling file that is renamed over the target, so a crash mid-write
/// never leaves a truncated artifact.
pub fn atomic_write(path: &Path, content: &[u8]) -> Result<(), IoError> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = parent {
        fs::create_dir_all(dir).map_err(|e| IoError::file(path, e))?;
    }
    let mut stem = path.file_name().map(|n| n.to_os_string()).ok_or_else(|| {
        IoError::content(path, "path has no file name")
    })?;
    stem.push(".tmp");
    let tmp = match parent {
        Some(dir) => dir.join(&stem),
        None => Path::new(&stem).to_path_buf(),
    };
    let mut file = fs::File::create(&tmp).map_err(|e| IoError::file(&tmp, e))?;
    file.write_all(content).map_err(|e| IoError::file(&tmp, e))?;
    file.sync_all().map_err(|e| IoError::file(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| IoError::file(path, e))?;
    Ok(())
}

/// Hex SHA-256 digest of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 digest of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String, IoError> {
    let bytes = fs::read(path).map_err(|e| IoError::file(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_creates_parents_and_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/out.txt");
        atomic_write(&path, b"first").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "first");
        atomic_write(&path, b"second").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "second");
        // No temporary file lingers.
        let names: Vec<_> = fs::read_dir(path.parent().unwrap())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names, ["out.txt"]);
    }

    #[test]
    fn sha256_matches_known_vector() {
        // Standard test vector for the empty string.
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        fs::write(&path, b"abc").unwrap();
        assert_eq!(
            sha256_file(&path).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
