//! Deterministic ZIP packaging.
//!
//! The same manifest over the same content must produce byte-identical
//! archives on every run and every host, because the archive's SHA-256 is
//! the transfer integrity reference. Determinism is engineered, not
//! accidental: entries are written in manifest order (sorted), timestamps
//! are pinned to a fixed epoch, permissions are normalized to two classes
//! (0644, 0755 for executables), and the compression method and level never
//! vary.

use crate::error::TransportError;
use crate::manifest::{ManifestEntry, WorkspaceManifest};
use sha2::{Digest, Sha256};
use std::io::{Cursor, Read, Write};
use std::path::Path;
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, ZipArchive, ZipWriter};

/// All archive entries carry this timestamp. Chosen inside the DOS time
/// range every ZIP reader accepts; the real modification times are not
/// workspace content.
fn fixed_timestamp() -> zip::DateTime {
    zip::DateTime::from_date_and_time(2000, 1, 1, 0, 0, 0).expect("constant is in range")
}

/// Total decompressed size past which extraction aborts. Guards against
/// hostile archives; generous enough for any sane workspace.
const MAX_EXTRACTED_BYTES: u64 = 4 * 1024 * 1024 * 1024;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}

/// Build the deterministic archive for `manifest`, reading file content
/// from `root`.
pub fn build_archive(root: &Path, manifest: &WorkspaceManifest) -> Result<Vec<u8>, TransportError> {
    let mut writer = ZipWriter::new(Cursor::new(Vec::new()));
    for entry in &manifest.entries {
        let options = SimpleFileOptions::default()
            .compression_method(CompressionMethod::Deflated)
            .last_modified_time(fixed_timestamp())
            .unix_permissions(if entry.exec { 0o755 } else { 0o644 });
        writer.start_file(&entry.path, options)?;
        let path = root.join(&entry.path);
        let mut file = std::fs::File::open(&path)
            .map_err(TransportError::io(format!("open {}", path.display())))?;
        std::io::copy(&mut file, &mut writer)
            .map_err(TransportError::io(format!("archive {}", entry.path)))?;
    }
    Ok(writer.finish()?.into_inner())
}

/// Extract into `dest`, which must already exist. Entry paths are confined
/// to `dest`; anything that would escape fails the whole extraction.
/// Returns the manifest of what landed.
pub fn extract_archive(bytes: &[u8], dest: &Path) -> Result<WorkspaceManifest, TransportError> {
    let mut archive = ZipArchive::new(Cursor::new(bytes))?;
    let mut entries = Vec::with_capacity(archive.len());
    let mut budget = MAX_EXTRACTED_BYTES;
    for index in 0..archive.len() {
        let mut file = archive.by_index(index)?;
        let Some(enclosed) = file.enclosed_name() else {
            return Err(TransportError::UnsafeArchivePath(file.name().to_string()));
        };
        let rel = enclosed.clone();
        let target = dest.join(&enclosed);
        if file.is_dir() {
            std::fs::create_dir_all(&target)
                .map_err(TransportError::io(format!("mkdir {}", target.display())))?;
            continue;
        }
        if let Some(parent) = target.parent() {
            std::fs::create_dir_all(parent)
                .map_err(TransportError::io(format!("mkdir {}", parent.display())))?;
        }

        let exec = file.unix_mode().is_some_and(|m| m & 0o100 != 0);
        let mut hasher = Sha256::new();
        let mut out = std::fs::File::create(&target)
            .map_err(TransportError::io(format!("create {}", target.display())))?;
        let mut buf = [0u8; 64 * 1024];
        let mut size = 0u64;
        loop {
            let n = file
                .read(&mut buf)
                .map_err(TransportError::io(format!("inflate {}", rel.display())))?;
            if n == 0 {
                break;
            }
            size += n as u64;
            budget = budget.checked_sub(n as u64).ok_or(TransportError::ArchiveTooLarge {
                actual: MAX_EXTRACTED_BYTES + 1,
                cap: MAX_EXTRACTED_BYTES,
            })?;
            hasher.update(&buf[..n]);
            out.write_all(&buf[..n])
                .map_err(TransportError::io(format!("write {}", target.display())))?;
        }
        drop(out);
        let mode = if exec { 0o755 } else { 0o644 };
        std::fs::set_permissions(&target, {
            use std::os::unix::fs::PermissionsExt;
            std::fs::Permissions::from_mode(mode)
        })
        .map_err(TransportError::io(format!("chmod {}", target.display())))?;

        let rel_str = rel
            .to_str()
            .ok_or_else(|| TransportError::NonUtf8Path(rel.clone()))?
            .to_string();
        entries.push(ManifestEntry {
            path: rel_str,
            size,
            sha256: hex::encode(hasher.finalize()),
            exec,
        });
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(WorkspaceManifest { entries })
}

/// Convenience: capture, archive, and digest in one step.
pub fn package_workspace(
    root: &Path,
    manifest: &WorkspaceManifest,
) -> Result<(Vec<u8>, String), TransportError> {
    let bytes = build_archive(root, manifest)?;
    let digest = sha256_hex(&bytes);
    Ok((bytes, digest))
}
