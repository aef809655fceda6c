//! Small filesystem helpers shared by every writer.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{IfaError, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| IfaError::io(parent, e))?;
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| IfaError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| IfaError::io(&tmp, e))?;
    f.sync_all().map_err(|e| IfaError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| IfaError::io(path, e))
}

pub fn write_json_atomic<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| IfaError::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| IfaError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| IfaError::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| IfaError::io(path, e))
}
