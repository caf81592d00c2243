//! Loopback live transport for co-located nodes. Read-write leases project
//! the origin directory itself (the workDir is a symlink to it), so edits
//! are visible to the delegator the instant they land. Read-only leases get
//! a write-stripped copy instead: a symlink cannot enforce the mode, and
//! stripping bits on the origin would vandalise the delegator's tree.
//!
//! Live sync makes snapshots redundant here, so both capture and resolve
//! refuse.

use crate::adapter::{
    CleanupPhase, DelegatorTransport, ExecutorTransport, PhaseGate, ResolvedSnapshot,
};
use crate::error::TransportError;
use crate::fsutil;
use crate::manifest::WorkspaceManifest;
use crate::pattern::PatternSet;
use awcp_core::{LeaseMode, SnapshotDescriptor, TransportHandle, TransportKind};
use async_trait::async_trait;
use std::path::Path;

pub struct LoopbackDelegator {
    gate: PhaseGate,
}

impl LoopbackDelegator {
    pub fn new() -> Self {
        LoopbackDelegator { gate: PhaseGate::new() }
    }
}

impl Default for LoopbackDelegator {
    fn default() -> Self {
        Self::new()
    }
}

#[async_trait]
impl DelegatorTransport for LoopbackDelegator {
    fn kind(&self) -> TransportKind {
        TransportKind::LoopbackLive
    }

    async fn package(
        &mut self,
        workspace_root: &Path,
        _manifest: &WorkspaceManifest,
    ) -> Result<TransportHandle, TransportError> {
        // The handle names the origin; nothing is copied at this point.
        let origin = workspace_root
            .canonicalize()
            .map_err(TransportError::io("canonicalize origin"))?;
        let origin_path = origin
            .to_str()
            .ok_or_else(|| TransportError::NonUtf8Path(origin.clone()))?
            .to_string();
        Ok(TransportHandle::LoopbackLive { origin_path })
    }

    async fn resolve_snapshot(
        &mut self,
        descriptor: &SnapshotDescriptor,
    ) -> Result<ResolvedSnapshot, TransportError> {
        Err(TransportError::Unavailable(format!(
            "loopback-live is continuously synchronized; snapshot {} has nothing to resolve",
            descriptor.snapshot_id
        )))
    }

    async fn detach(&mut self) -> Result<(), TransportError> {
        self.gate.begin_detach();
        Ok(())
    }

    async fn release(&mut self) -> Result<(), TransportError> {
        self.gate.begin_release()?;
        Ok(())
    }

    fn phase(&self) -> CleanupPhase {
        self.gate.phase()
    }
}

pub struct LoopbackExecutor {
    patterns: PatternSet,
    gate: PhaseGate,
}

impl LoopbackExecutor {
    pub fn new(patterns: PatternSet) -> Self {
        LoopbackExecutor { patterns, gate: PhaseGate::new() }
    }
}

#[async_trait]
impl ExecutorTransport for LoopbackExecutor {
    fn kind(&self) -> TransportKind {
        TransportKind::LoopbackLive
    }

    async fn provision(
        &mut self,
        handle: &TransportHandle,
        work_dir: &Path,
        mode: LeaseMode,
    ) -> Result<(), TransportError> {
        let TransportHandle::LoopbackLive { origin_path } = handle else {
            return Err(TransportError::HandleMismatch {
                handle: handle.kind().to_string(),
                adapter: "loopback-live".into(),
            });
        };
        let origin = Path::new(origin_path);
        if !origin.is_dir() {
            return Err(TransportError::Unavailable(format!(
                "origin {origin_path} is not a reachable directory"
            )));
        }
        match mode {
            LeaseMode::ReadWrite => {
                // The pre-created empty workDir is replaced by a symlink so
                // the backend works directly inside the origin.
                fsutil::remove_tree(work_dir)?;
                std::os::unix::fs::symlink(origin, work_dir)
                    .map_err(TransportError::io("project origin"))?;
            }
            LeaseMode::ReadOnly => {
                fsutil::copy_tree(origin, work_dir, &self.patterns)?;
                fsutil::strip_write_bits(work_dir)?;
            }
        }
        Ok(())
    }

    async fn capture_snapshot(
        &mut self,
        _work_dir: &Path,
        snapshot_id: &str,
        _recommended: bool,
    ) -> Result<SnapshotDescriptor, TransportError> {
        Err(TransportError::Unavailable(format!(
            "loopback-live is continuously synchronized; snapshot {snapshot_id} not captured"
        )))
    }

    async fn detach(&mut self, _work_dir: &Path) -> Result<(), TransportError> {
        self.gate.begin_detach();
        Ok(())
    }

    async fn release(&mut self, work_dir: &Path) -> Result<(), TransportError> {
        if self.gate.begin_release()? {
            // remove_tree unlinks a symlinked workDir without following it,
            // so the origin always survives release.
            fsutil::remove_tree(work_dir)?;
        }
        Ok(())
    }

    fn phase(&self) -> CleanupPhase {
        self.gate.phase()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn origin_fixture() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("src")).unwrap();
        fs::write(dir.path().join("src/lib.rs"), "pub fn f() {}\n").unwrap();
        fs::write(dir.path().join("notes.md"), "# notes\n").unwrap();
        dir
    }

    #[tokio::test]
    async fn read_write_lease_projects_the_origin_itself() {
        let origin = origin_fixture();
        let manifest =
            WorkspaceManifest::capture(origin.path(), &PatternSet::everything(), false).unwrap();

        let mut delegator = LoopbackDelegator::new();
        let handle = delegator.package(origin.path(), &manifest).await.unwrap();

        let parent = tempfile::tempdir().unwrap();
        let work = parent.path().join("work");
        fs::create_dir(&work).unwrap();
        let mut executor = LoopbackExecutor::new(PatternSet::everything());
        executor.provision(&handle, &work, LeaseMode::ReadWrite).await.unwrap();

        // Writes through the workDir land in the origin immediately.
        fs::write(work.join("src/new.rs"), "pub const N: u8 = 1;\n").unwrap();
        assert_eq!(
            fs::read_to_string(origin.path().join("src/new.rs")).unwrap(),
            "pub const N: u8 = 1;\n"
        );

        executor.detach(&work).await.unwrap();
        executor.release(&work).await.unwrap();
        assert!(!work.exists(), "workDir symlink must be unlinked");
        assert!(
            origin.path().join("src/lib.rs").exists(),
            "origin must survive workDir release"
        );
    }

    #[tokio::test]
    async fn read_only_lease_gets_an_unwritable_copy() {
        let origin = origin_fixture();
        let manifest =
            WorkspaceManifest::capture(origin.path(), &PatternSet::everything(), false).unwrap();

        let mut delegator = LoopbackDelegator::new();
        let handle = delegator.package(origin.path(), &manifest).await.unwrap();

        let parent = tempfile::tempdir().unwrap();
        let work = parent.path().join("work");
        fs::create_dir(&work).unwrap();
        let mut executor = LoopbackExecutor::new(PatternSet::everything());
        executor.provision(&handle, &work, LeaseMode::ReadOnly).await.unwrap();

        assert!(!work.join("src").is_symlink(), "read-only projection is a copy");
        // Mode bits are asserted directly; a root test runner would pass a
        // write attempt regardless.
        use std::os::unix::fs::PermissionsExt;
        let mode = fs::metadata(work.join("src/lib.rs")).unwrap().permissions().mode();
        assert_eq!(mode & 0o222, 0, "copy must carry no write bits");
        // The origin keeps its own permissions.
        let origin_mode =
            fs::metadata(origin.path().join("src/lib.rs")).unwrap().permissions().mode();
        assert_ne!(origin_mode & 0o200, 0, "origin must stay writable");

        executor.detach(&work).await.unwrap();
        executor.release(&work).await.unwrap();
        assert!(!work.exists());
    }

    #[tokio::test]
    async fn snapshots_are_refused_in_both_directions() {
        let origin = origin_fixture();
        let mut executor = LoopbackExecutor::new(PatternSet::everything());
        let err = executor
            .capture_snapshot(origin.path(), "s-1", true)
            .await
            .unwrap_err();
        assert!(matches!(err, TransportError::Unavailable(_)));

        let mut delegator = LoopbackDelegator::new();
        let descriptor = SnapshotDescriptor {
            snapshot_id: "s-1".into(),
            data: awcp_core::SnapshotData::Inline { data_base64: String::new() },
            sha256: String::new(),
            recommended: false,
            captured_at: chrono::Utc::now(),
        };
        let err = delegator.resolve_snapshot(&descriptor).await.unwrap_err();
        assert!(matches!(err, TransportError::Unavailable(_)));
    }

    #[tokio::test]
    async fn unreachable_origin_is_reported_as_unavailable() {
        let parent = tempfile::tempdir().unwrap();
        let work = parent.path().join("work");
        fs::create_dir(&work).unwrap();
        let handle = TransportHandle::LoopbackLive {
            origin_path: "/nonexistent/awcp-origin".into(),
        };
        let mut executor = LoopbackExecutor::new(PatternSet::everything());
        let err = executor
            .provision(&handle, &work, LeaseMode::ReadWrite)
            .await
            .unwrap_err();
        assert!(matches!(err, TransportError::Unavailable(_)));
    }
}
