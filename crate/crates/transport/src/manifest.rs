//! Workspace manifests: the sorted (path, size, hash, exec) listing that
//! admission control sizes, integrity checks compare, and deterministic
//! archives are built from.

use crate::error::TransportError;
use crate::pattern::PatternSet;
use awcp_core::canonical_json;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Read;
use std::os::unix::fs::PermissionsExt;
use std::path::{Component, Path};

/// One file. Directories are implicit; empty directories do not travel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ManifestEntry {
    /// Workspace-relative, `/`-separated.
    pub path: String,
    pub size: u64,
    /// Hex SHA-256 of the file content.
    pub sha256: String,
    /// Owner-executable bit. The only mode information that travels; full
    /// permission bits are host policy, not workspace content.
    pub exec: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "camelCase")]
pub struct WorkspaceManifest {
    /// Sorted by path, byte-wise.
    pub entries: Vec<ManifestEntry>,
}

impl WorkspaceManifest {
    /// Walk `root` and hash every file matching `patterns`.
    ///
    /// Symlinks are followed and recorded as their target's content. A link
    /// whose resolved target lies outside `root` fails the capture unless
    /// `follow_outside_root` says otherwise; that decision belongs to the
    /// caller's admission policy. A top-level `.git` entry never travels:
    /// transports may park their own metadata there.
    pub fn capture(
        root: &Path,
        patterns: &PatternSet,
        follow_outside_root: bool,
    ) -> Result<Self, TransportError> {
        let canonical_root = root
            .canonicalize()
            .map_err(TransportError::io(format!("canonicalize {}", root.display())))?;

        let mut entries = Vec::new();
        let walker = walkdir::WalkDir::new(&canonical_root)
            .follow_links(false)
            .sort_by_file_name();
        for item in walker {
            let item = item.map_err(|e| TransportError::Io {
                context: format!("walk {}", canonical_root.display()),
                source: e.into(),
            })?;
            let rel = item
                .path()
                .strip_prefix(&canonical_root)
                .expect("walkdir yields paths under its root")
                .to_path_buf();
            if rel.as_os_str().is_empty() || is_transport_metadata(&rel) {
                continue;
            }
            let file_type = item.file_type();
            if file_type.is_dir() {
                continue;
            }
            // Filter before resolving links: the escape rule applies to what
            // would travel, not to excluded paths.
            if !patterns.matches(&rel) {
                continue;
            }
            let rel_str = rel
                .to_str()
                .ok_or_else(|| TransportError::NonUtf8Path(rel.clone()))?
                .to_string();

            let data_path = if file_type.is_symlink() {
                let target = item.path().canonicalize().map_err(TransportError::io(format!(
                    "resolve symlink {}",
                    item.path().display()
                )))?;
                if !target.starts_with(&canonical_root) && !follow_outside_root {
                    return Err(TransportError::SymlinkEscapes(rel));
                }
                target
            } else {
                item.path().to_path_buf()
            };

            let metadata = std::fs::metadata(&data_path)
                .map_err(TransportError::io(format!("stat {}", data_path.display())))?;
            if metadata.is_dir() {
                // A symlink to a directory is not descended; inside-root
                // directory content is captured at its real path anyway.
                continue;
            }

            let (size, sha256) = hash_file(&data_path)?;
            let exec = metadata.permissions().mode() & 0o100 != 0;
            entries.push(ManifestEntry { path: rel_str, size, sha256, exec });
        }

        entries.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(WorkspaceManifest { entries })
    }

    pub fn file_count(&self) -> usize {
        self.entries.len()
    }

    pub fn total_bytes(&self) -> u64 {
        self.entries.iter().map(|e| e.size).sum()
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.binary_search_by(|e| e.path.as_str().cmp(path)).is_ok()
    }

    pub fn get(&self, path: &str) -> Option<&ManifestEntry> {
        self.entries
            .binary_search_by(|e| e.path.as_str().cmp(path))
            .ok()
            .map(|i| &self.entries[i])
    }

    /// Hex SHA-256 over the canonical JSON form; a compact fingerprint for
    /// logs and comparisons.
    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("manifest is plain data");
        let mut hasher = Sha256::new();
        hasher.update(canonical_json(&value).as_bytes());
        hex::encode(hasher.finalize())
    }
}

/// Paths a transport claims for itself and that therefore never travel:
/// a top-level `.git` (file or directory).
pub(crate) fn is_transport_metadata(rel: &Path) -> bool {
    matches!(rel.components().next(), Some(Component::Normal(first)) if first == ".git")
}

fn hash_file(path: &Path) -> Result<(u64, String), TransportError> {
    let file = std::fs::File::open(path)
        .map_err(TransportError::io(format!("open {}", path.display())))?;
    let mut reader = std::io::BufReader::new(file);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    let mut size = 0u64;
    loop {
        let n = reader
            .read(&mut buf)
            .map_err(TransportError::io(format!("read {}", path.display())))?;
        if n == 0 {
            break;
        }
        size += n as u64;
        hasher.update(&buf[..n]);
    }
    Ok((size, hex::encode(hasher.finalize())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(root: &Path, rel: &str, content: &str) {
        let path = root.join(rel);
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, content).unwrap();
    }

    #[test]
    fn capture_is_sorted_sized_and_hashed() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "b.txt", "bravo");
        write(dir.path(), "a/nested.txt", "alpha");
        write(dir.path(), "a/zz.bin", "");

        let m = WorkspaceManifest::capture(dir.path(), &PatternSet::everything(), false).unwrap();
        let paths: Vec<&str> = m.entries.iter().map(|e| e.path.as_str()).collect();
        assert_eq!(paths, vec!["a/nested.txt", "a/zz.bin", "b.txt"]);
        assert_eq!(m.total_bytes(), 10);
        assert_eq!(m.file_count(), 3);
        // Frozen: sha256("alpha")
        assert_eq!(
            m.get("a/nested.txt").unwrap().sha256,
            "8ed3f6ad685b959ead7022518e1af76cd816f8e8ec7ccdda1ed4018e8f2223f8"
        );
        // Frozen: sha256 of the empty string.
        assert_eq!(
            m.get("a/zz.bin").unwrap().sha256,
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn patterns_scope_the_capture() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "src/lib.rs", "pub fn f() {}");
        write(dir.path(), "target/out.o", "obj");
        write(dir.path(), "notes.log", "log");

        let ps = PatternSet::compile(&awcp_core::EnvironmentDeclaration {
            resources: vec!["**".into()],
            excludes: vec!["target/**".into(), "**/*.log".into()],
        })
        .unwrap();
        let m = WorkspaceManifest::capture(dir.path(), &ps, false).unwrap();
        let paths: Vec<&str> = m.entries.iter().map(|e| e.path.as_str()).collect();
        assert_eq!(paths, vec!["src/lib.rs"]);
    }

    #[test]
    fn exec_bit_travels_other_mode_bits_do_not() {
        use std::os::unix::fs::PermissionsExt;
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "run.sh", "#!/bin/sh\n");
        write(dir.path(), "data.txt", "x");
        fs::set_permissions(dir.path().join("run.sh"), fs::Permissions::from_mode(0o755)).unwrap();
        fs::set_permissions(dir.path().join("data.txt"), fs::Permissions::from_mode(0o600)).unwrap();

        let m = WorkspaceManifest::capture(dir.path(), &PatternSet::everything(), false).unwrap();
        assert!(m.get("run.sh").unwrap().exec);
        assert!(!m.get("data.txt").unwrap().exec);
    }

    #[test]
    fn inside_symlinks_travel_as_their_target_content() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "real.txt", "payload");
        std::os::unix::fs::symlink(dir.path().join("real.txt"), dir.path().join("link.txt"))
            .unwrap();

        let m = WorkspaceManifest::capture(dir.path(), &PatternSet::everything(), false).unwrap();
        assert_eq!(m.get("link.txt").unwrap().sha256, m.get("real.txt").unwrap().sha256);
    }

    #[test]
    fn escaping_symlinks_fail_capture_unless_allowed() {
        let outside = tempfile::tempdir().unwrap();
        fs::write(outside.path().join("secret.txt"), "s3cret").unwrap();
        let dir = tempfile::tempdir().unwrap();
        std::os::unix::fs::symlink(outside.path().join("secret.txt"), dir.path().join("leak"))
            .unwrap();

        let err =
            WorkspaceManifest::capture(dir.path(), &PatternSet::everything(), false).unwrap_err();
        assert!(matches!(err, TransportError::SymlinkEscapes(p) if p == Path::new("leak")));

        let m = WorkspaceManifest::capture(dir.path(), &PatternSet::everything(), true).unwrap();
        assert_eq!(m.get("leak").unwrap().size, 6);
    }

    #[test]
    fn top_level_git_metadata_never_travels() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), ".git/config", "[core]");
        write(dir.path(), ".git/objects/aa/bb", "blob");
        write(dir.path(), "src/.gitignore", "target");
        write(dir.path(), "code.rs", "fn main() {}");

        let m = WorkspaceManifest::capture(dir.path(), &PatternSet::everything(), false).unwrap();
        let paths: Vec<&str> = m.entries.iter().map(|e| e.path.as_str()).collect();
        // Nested dotfiles are ordinary content; only the transport's own
        // top-level .git is reserved.
        assert_eq!(paths, vec!["code.rs", "src/.gitignore"]);
    }

    #[test]
    fn digest_is_stable_and_content_sensitive() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "f.txt", "one");
        let m1 = WorkspaceManifest::capture(dir.path(), &PatternSet::everything(), false).unwrap();
        let m2 = WorkspaceManifest::capture(dir.path(), &PatternSet::everything(), false).unwrap();
        assert_eq!(m1.digest(), m2.digest());

        write(dir.path(), "f.txt", "two");
        let m3 = WorkspaceManifest::capture(dir.path(), &PatternSet::everything(), false).unwrap();
        assert_ne!(m1.digest(), m3.digest());
    }
}
