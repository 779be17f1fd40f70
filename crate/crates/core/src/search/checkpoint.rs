use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::SearchSnapshot;

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("dataset digest mismatch: checkpoint has {expected}, file has {found}")]
    DigestMismatch { expected: String, found: String },
}

/// On-disk checkpoint: the search snapshot plus the dataset digest it was
/// taken against and caller-defined metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub dataset_digest: String,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub snapshot: SearchSnapshot,
}

impl Checkpoint {
    pub fn verify_digest(&self, found: &str) -> Result<(), CheckpointError> {
        if self.dataset_digest != found {
            return Err(CheckpointError::DigestMismatch {
                expected: self.dataset_digest.clone(),
                found: found.to_owned(),
            });
        }
        Ok(())
    }
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.to_owned(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(contents).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
        path: path.to_owned(),
        source,
    })?;
    let cp: Checkpoint =
        serde_json::from_str(&text).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    if cp.format != CHECKPOINT_FORMAT {
        return Err(CheckpointError::Corrupt(format!(
            "unsupported format {}",
            cp.format
        )));
    }
    Ok(cp)
}

/// Receives snapshots as the search progresses.
pub trait CheckpointSink {
    fn save(&mut self, snapshot: &SearchSnapshot) -> Result<(), CheckpointError>;
}

/// Discards snapshots.
pub struct NoCheckpoint;

impl CheckpointSink for NoCheckpoint {
    fn save(&mut self, _: &SearchSnapshot) -> Result<(), CheckpointError> {
        Ok(())
    }
}

impl<F> CheckpointSink for F
where
    F: FnMut(&SearchSnapshot) -> Result<(), CheckpointError>,
{
    fn save(&mut self, snapshot: &SearchSnapshot) -> Result<(), CheckpointError> {
        self(snapshot)
    }
}
