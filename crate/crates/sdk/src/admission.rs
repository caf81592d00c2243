//! Delegator-side admission control: only well-scoped, size-bounded,
//! secret-free workspace projections get past this gate, before any message
//! leaves the node.

use awcp_core::{EnvironmentDeclaration, ErrorCode, ProtocolError};
use awcp_transport::{PatternSet, TransportError, WorkspaceManifest};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AdmissionPolicy {
    /// Absolute prefixes a workspace root must live under.
    pub allowed_roots: Vec<PathBuf>,
    pub max_total_bytes: u64,
    pub max_file_count: usize,
    /// Paths matching any of these never leave the node (key material,
    /// credentials).
    #[serde(default)]
    pub deny_patterns: Vec<String>,
    #[serde(default)]
    pub follow_symlinks_outside_root: bool,
}

impl AdmissionPolicy {
    /// Wide-open policy rooted at `root`, for tests and single-user setups.
    pub fn permissive(root: impl Into<PathBuf>) -> Self {
        AdmissionPolicy {
            allowed_roots: vec![root.into()],
            max_total_bytes: u64::MAX,
            max_file_count: usize::MAX,
            deny_patterns: Vec::new(),
            follow_symlinks_outside_root: false,
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.allowed_roots.is_empty() {
            return Err(ProtocolError::new(
                ErrorCode::InvalidState,
                "admission policy must allow at least one root",
            ));
        }
        Ok(())
    }

    /// Gate a projection request. Returns the manifest of exactly the files
    /// that would travel, or ADMISSION_DENIED naming the first violation.
    pub fn admit(
        &self,
        workspace_root: &Path,
        env: &EnvironmentDeclaration,
    ) -> Result<WorkspaceManifest, ProtocolError> {
        self.validate()?;
        let denied = |msg: String| ProtocolError::new(ErrorCode::AdmissionDenied, msg);

        let root = workspace_root
            .canonicalize()
            .map_err(|e| denied(format!("workspace root {}: {e}", workspace_root.display())))?;
        let inside_allowed = self.allowed_roots.iter().any(|allowed| {
            allowed.canonicalize().map(|a| root.starts_with(&a)).unwrap_or(false)
        });
        if !inside_allowed {
            return Err(denied(format!("{} is outside every allowed root", root.display())));
        }

        let patterns = PatternSet::compile(env)
            .map_err(|e| denied(format!("environment declaration: {e}")))?;
        let manifest =
            WorkspaceManifest::capture(&root, &patterns, self.follow_symlinks_outside_root)
                .map_err(|e| match e {
                    TransportError::SymlinkEscapes(p) => {
                        denied(format!("symlink {} escapes the workspace root", p.display()))
                    }
                    other => denied(format!("capture failed: {other}")),
                })?;

        if !self.deny_patterns.is_empty() {
            let deny = PatternSet::compile(&EnvironmentDeclaration {
                resources: self.deny_patterns.clone(),
                excludes: Vec::new(),
            })
            .map_err(|e| denied(format!("deny patterns: {e}")))?;
            if let Some(hit) = manifest.entries.iter().find(|e| deny.matches(Path::new(&e.path))) {
                return Err(denied(format!("{} matches a deny pattern", hit.path)));
            }
        }

        if manifest.file_count() > self.max_file_count {
            return Err(denied(format!(
                "projection has {} files, limit is {}",
                manifest.file_count(),
                self.max_file_count
            )));
        }
        if manifest.total_bytes() > self.max_total_bytes {
            return Err(denied(format!(
                "projection is {} bytes, limit is {}",
                manifest.total_bytes(),
                self.max_total_bytes
            )));
        }
        Ok(manifest)
    }
}
