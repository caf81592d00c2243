//! Snapshot reconciliation: land a resolved snapshot tree onto the
//! delegator's workspace and report exactly what changed.
//!
//! Application is scoped by the environment patterns in both directions:
//! files outside the declared environment are neither overwritten nor
//! deleted, no matter what the snapshot contains. Applying a snapshot that
//! matches the current workspace is a no-op with an empty summary, which is
//! what makes redelivered snapshots harmless.

use crate::error::TransportError;
use crate::manifest::WorkspaceManifest;
use crate::pattern::PatternSet;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

/// What one snapshot application did to the workspace, by relative path.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChangeSummary {
    pub added: Vec<String>,
    pub modified: Vec<String>,
    pub deleted: Vec<String>,
}

impl ChangeSummary {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.modified.is_empty() && self.deleted.is_empty()
    }

    pub fn total(&self) -> usize {
        self.added.len() + self.modified.len() + self.deleted.len()
    }
}

impl std::fmt::Display for ChangeSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "+{} ~{} -{}",
            self.added.len(),
            self.modified.len(),
            self.deleted.len()
        )
    }
}

/// Make `target_root`'s pattern-scoped content equal to `source_root`'s.
pub fn apply_tree(
    target_root: &Path,
    source_root: &Path,
    patterns: &PatternSet,
) -> Result<ChangeSummary, TransportError> {
    let source = WorkspaceManifest::capture(source_root, patterns, false)?;
    let target = WorkspaceManifest::capture(target_root, patterns, false)?;
    let target_by_path: BTreeMap<&str, _> =
        target.entries.iter().map(|e| (e.path.as_str(), e)).collect();
    let source_by_path: BTreeMap<&str, _> =
        source.entries.iter().map(|e| (e.path.as_str(), e)).collect();

    let mut summary = ChangeSummary::default();

    for entry in &source.entries {
        let changed = match target_by_path.get(entry.path.as_str()) {
            None => {
                summary.added.push(entry.path.clone());
                true
            }
            Some(existing) => {
                if existing.sha256 != entry.sha256 || existing.exec != entry.exec {
                    summary.modified.push(entry.path.clone());
                    true
                } else {
                    false
                }
            }
        };
        if changed {
            let from = source_root.join(&entry.path);
            let to = target_root.join(&entry.path);
            if let Some(parent) = to.parent() {
                fs::create_dir_all(parent)
                    .map_err(TransportError::io(format!("mkdir {}", parent.display())))?;
            }
            // Replace rather than write-through: if the target is a symlink
            // the snapshot's regular file takes its place instead of
            // mutating whatever the link points at.
            match fs::remove_file(&to) {
                Ok(_) => {}
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(TransportError::io(format!("unlink {}", to.display()))(e)),
            }
            fs::copy(&from, &to)
                .map_err(TransportError::io(format!("apply {}", entry.path)))?;
            use std::os::unix::fs::PermissionsExt;
            let mode = if entry.exec { 0o755 } else { 0o644 };
            fs::set_permissions(&to, fs::Permissions::from_mode(mode))
                .map_err(TransportError::io(format!("chmod {}", to.display())))?;
        }
    }

    for entry in &target.entries {
        if !source_by_path.contains_key(entry.path.as_str()) {
            summary.deleted.push(entry.path.clone());
            let path = target_root.join(&entry.path);
            fs::remove_file(&path)
                .map_err(TransportError::io(format!("delete {}", path.display())))?;
        }
    }

    Ok(summary)
}
