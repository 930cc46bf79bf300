//! On-disk artifacts: adapter files, base-model checkpoints, run configs,
//! and report emission. All writes are atomic (write to a temp file in the
//! target directory, then rename) and every artifact embeds the hash of the
//! run config that produced it.

mod adapter_file;
mod checkpoint;
mod report_io;
mod run_config;

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use adapter_file::{load_adapter, save_adapter, AdapterFileMeta};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use report_io::{
    aggregates_csv, report_csv, report_json, weight_summaries_csv, REPORT_SCHEMA_VERSION,
};
pub use run_config::{AblationConfig, AblationKind, CkaConfig, RunConfig, SuiteConfig};

/// First 16 hex chars of SHA-256.
pub fn sha256_hex16(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes via a temp file in the same directory plus rename, so readers
/// never observe a partial artifact.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
