//! Filesystem helpers shared by the adapters.
//!
//! Everything here is deliberately symlink-aware: executor workDirs may BE
//! symlinks (live projection), in which case teardown must remove the link
//! and never reach through it into the origin tree.

use crate::error::TransportError;
use crate::manifest::is_transport_metadata;
use crate::pattern::PatternSet;
use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::Path;

/// Copy the files under `src` selected by `patterns` into `dst`, creating
/// parent directories as needed. Symlinked files are copied as content.
pub fn copy_tree(src: &Path, dst: &Path, patterns: &PatternSet) -> Result<u64, TransportError> {
    let mut copied = 0u64;
    for item in walkdir::WalkDir::new(src).follow_links(true).sort_by_file_name() {
        let item = item.map_err(|e| TransportError::Io {
            context: format!("walk {}", src.display()),
            source: e.into(),
        })?;
        if !item.file_type().is_file() {
            continue;
        }
        let rel = item.path().strip_prefix(src).expect("under walk root");
        if is_transport_metadata(rel) || !patterns.matches(rel) {
            continue;
        }
        let target = dst.join(rel);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent)
                .map_err(TransportError::io(format!("mkdir {}", parent.display())))?;
        }
        fs::copy(item.path(), &target)
            .map_err(TransportError::io(format!("copy {}", item.path().display())))?;
        copied += 1;
    }
    Ok(copied)
}

/// Drop write permission everywhere under `root` (files and directories),
/// enforcing a read-only lease at the filesystem level.
pub fn strip_write_bits(root: &Path) -> Result<(), TransportError> {
    // Files first, directories afterwards deepest-first, so the walk itself
    // never trips over a directory it already made read-only.
    for item in walkdir::WalkDir::new(root).follow_links(false).contents_first(true) {
        let item = item.map_err(|e| TransportError::Io {
            context: format!("walk {}", root.display()),
            source: e.into(),
        })?;
        if item.file_type().is_symlink() {
            continue;
        }
        let mode = item_mode(&item)? & 0o555;
        fs::set_permissions(item.path(), fs::Permissions::from_mode(mode))
            .map_err(TransportError::io(format!("chmod {}", item.path().display())))?;
    }
    Ok(())
}

fn item_mode(item: &walkdir::DirEntry) -> Result<u32, TransportError> {
    Ok(item
        .metadata()
        .map_err(|e| TransportError::Io {
            context: format!("stat {}", item.path().display()),
            source: e.into(),
        })?
        .permissions()
        .mode())
}

/// Remove a workDir or temp tree, whatever state it is in: absent, a
/// symlink, read-only, or an ordinary tree. Never follows the top-level
/// symlink, so a live-projected origin survives its workDir's removal.
pub fn remove_tree(path: &Path) -> Result<(), TransportError> {
    let meta = match fs::symlink_metadata(path) {
        Ok(meta) => meta,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(TransportError::io(format!("stat {}", path.display()))(e)),
    };
    if meta.file_type().is_symlink() || meta.is_file() {
        return fs::remove_file(path)
            .map_err(TransportError::io(format!("unlink {}", path.display())));
    }
    // Restore write bits so read-only leases do not block their own cleanup.
    for item in walkdir::WalkDir::new(path).follow_links(false) {
        let Ok(item) = item else { continue };
        if item.file_type().is_dir() {
            let _ = fs::set_permissions(item.path(), fs::Permissions::from_mode(0o755));
        }
    }
    fs::remove_dir_all(path).map_err(TransportError::io(format!("rm -r {}", path.display())))
}

/// Create `path` as an empty directory, failing if it exists non-empty.
pub fn ensure_empty_dir(path: &Path) -> Result<(), TransportError> {
    match fs::read_dir(path) {
        Ok(mut entries) => {
            if entries.next().is_some() {
                return Err(TransportError::Io {
                    context: format!("{} must be empty", path.display()),
                    source: std::io::Error::new(std::io::ErrorKind::AlreadyExists, "not empty"),
                });
            }
            Ok(())
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => fs::create_dir_all(path)
            .map_err(TransportError::io(format!("mkdir {}", path.display()))),
        Err(e) => Err(TransportError::io(format!("read {}", path.display()))(e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_tree_respects_patterns() {
        let src = tempfile::tempdir().unwrap();
        let dst = tempfile::tempdir().unwrap();
        fs::create_dir_all(src.path().join("keep")).unwrap();
        fs::write(src.path().join("keep/a.txt"), "a").unwrap();
        fs::write(src.path().join("drop.log"), "l").unwrap();

        let ps = PatternSet::compile(&awcp_core::EnvironmentDeclaration {
            resources: vec!["**".into()],
            excludes: vec!["**/*.log".into()],
        })
        .unwrap();
        let copied = copy_tree(src.path(), dst.path(), &ps).unwrap();
        assert_eq!(copied, 1);
        assert!(dst.path().join("keep/a.txt").exists());
        assert!(!dst.path().join("drop.log").exists());
    }

    #[test]
    fn strip_then_remove_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ws");
        fs::create_dir_all(root.join("sub")).unwrap();
        fs::write(root.join("sub/f.txt"), "x").unwrap();

        strip_write_bits(&root).unwrap();
        // Mode bits are asserted directly: a root test runner bypasses
        // permission checks, so attempting the write proves nothing here.
        for p in [root.clone(), root.join("sub"), root.join("sub/f.txt")] {
            let mode = fs::metadata(&p).unwrap().permissions().mode();
            assert_eq!(mode & 0o222, 0, "write bits survived on {}", p.display());
        }

        remove_tree(&root).unwrap();
        assert!(!root.exists());
    }

    #[test]
    fn strip_preserves_exec_bits() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ws");
        fs::create_dir_all(&root).unwrap();
        fs::write(root.join("tool.sh"), "#!/bin/sh\n").unwrap();
        fs::set_permissions(root.join("tool.sh"), fs::Permissions::from_mode(0o755)).unwrap();

        strip_write_bits(&root).unwrap();
        let mode = fs::metadata(root.join("tool.sh")).unwrap().permissions().mode() & 0o777;
        assert_eq!(mode, 0o555);
        remove_tree(&root).unwrap();
    }

    #[test]
    fn remove_tree_on_a_symlink_leaves_the_origin_alone() {
        let origin = tempfile::tempdir().unwrap();
        fs::write(origin.path().join("precious.txt"), "data").unwrap();
        let holder = tempfile::tempdir().unwrap();
        let link = holder.path().join("workdir");
        std::os::unix::fs::symlink(origin.path(), &link).unwrap();

        remove_tree(&link).unwrap();
        assert!(!link.exists());
        assert!(origin.path().join("precious.txt").exists());
    }

    #[test]
    fn remove_tree_tolerates_absence() {
        remove_tree(Path::new("/tmp/awcp-definitely-not-here-12345")).unwrap();
    }

    #[test]
    fn ensure_empty_dir_rejects_populated_targets() {
        let dir = tempfile::tempdir().unwrap();
        let fresh = dir.path().join("fresh");
        ensure_empty_dir(&fresh).unwrap();
        ensure_empty_dir(&fresh).unwrap();
        fs::write(fresh.join("x"), "x").unwrap();
        assert!(ensure_empty_dir(&fresh).is_err());
    }
}
