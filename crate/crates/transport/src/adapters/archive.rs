//! Inline archive transport: the workspace rides inside the START message
//! as a base64 ZIP, snapshots ride back inside events the same way. No
//! third party involved, which makes it the zero-config default; the price
//! is the message-size cap.

use crate::adapter::{
    CleanupPhase, DelegatorTransport, ExecutorTransport, PhaseGate, ResolvedSnapshot,
};
use crate::archive::{build_archive, extract_archive, sha256_hex};
use crate::error::TransportError;
use crate::fsutil;
use crate::manifest::WorkspaceManifest;
use crate::pattern::PatternSet;
use awcp_core::{
    LeaseMode, SnapshotData, SnapshotDescriptor, TransportHandle, TransportKind,
};
use async_trait::async_trait;
use base64::Engine;
use chrono::Utc;
use std::path::Path;

const BASE64: base64::engine::GeneralPurpose = base64::engine::general_purpose::STANDARD;

pub struct ArchiveDelegator {
    max_bytes: u64,
    gate: PhaseGate,
}

impl ArchiveDelegator {
    pub fn new(max_bytes: u64) -> Self {
        ArchiveDelegator { max_bytes, gate: PhaseGate::new() }
    }
}

#[async_trait]
impl DelegatorTransport for ArchiveDelegator {
    fn kind(&self) -> TransportKind {
        TransportKind::Archive
    }

    async fn package(
        &mut self,
        workspace_root: &Path,
        manifest: &WorkspaceManifest,
    ) -> Result<TransportHandle, TransportError> {
        let bytes = build_archive(workspace_root, manifest)?;
        if bytes.len() as u64 > self.max_bytes {
            return Err(TransportError::ArchiveTooLarge {
                actual: bytes.len() as u64,
                cap: self.max_bytes,
            });
        }
        let sha256 = sha256_hex(&bytes);
        Ok(TransportHandle::Archive { data_base64: BASE64.encode(&bytes), sha256 })
    }

    async fn resolve_snapshot(
        &mut self,
        descriptor: &SnapshotDescriptor,
    ) -> Result<ResolvedSnapshot, TransportError> {
        let SnapshotData::Inline { data_base64 } = &descriptor.data else {
            return Err(TransportError::HandleMismatch {
                handle: "non-inline snapshot data".into(),
                adapter: "archive".into(),
            });
        };
        let bytes = BASE64
            .decode(data_base64)
            .map_err(|e| TransportError::IntegrityMismatch(format!("undecodable base64: {e}")))?;
        let actual = sha256_hex(&bytes);
        if actual != descriptor.sha256 {
            return Err(TransportError::IntegrityMismatch(format!(
                "snapshot {}: digest {} does not match declared {}",
                descriptor.snapshot_id, actual, descriptor.sha256
            )));
        }
        let dir = tempfile::tempdir().map_err(TransportError::io("snapshot temp dir"))?;
        extract_archive(&bytes, dir.path())?;
        Ok(ResolvedSnapshot::new(dir))
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

pub struct ArchiveExecutor {
    patterns: PatternSet,
    gate: PhaseGate,
}

impl ArchiveExecutor {
    pub fn new(patterns: PatternSet) -> Self {
        ArchiveExecutor { patterns, gate: PhaseGate::new() }
    }
}

#[async_trait]
impl ExecutorTransport for ArchiveExecutor {
    fn kind(&self) -> TransportKind {
        TransportKind::Archive
    }

    async fn provision(
        &mut self,
        handle: &TransportHandle,
        work_dir: &Path,
        mode: LeaseMode,
    ) -> Result<(), TransportError> {
        let TransportHandle::Archive { data_base64, sha256 } = handle else {
            return Err(TransportError::HandleMismatch {
                handle: handle.kind().to_string(),
                adapter: "archive".into(),
            });
        };
        let bytes = BASE64
            .decode(data_base64)
            .map_err(|e| TransportError::IntegrityMismatch(format!("undecodable base64: {e}")))?;
        let actual = sha256_hex(&bytes);
        if actual != *sha256 {
            return Err(TransportError::IntegrityMismatch(format!(
                "workspace archive digest {actual} does not match declared {sha256}"
            )));
        }
        extract_archive(&bytes, work_dir)?;
        if mode == LeaseMode::ReadOnly {
            fsutil::strip_write_bits(work_dir)?;
        }
        Ok(())
    }

    async fn capture_snapshot(
        &mut self,
        work_dir: &Path,
        snapshot_id: &str,
        recommended: bool,
    ) -> Result<SnapshotDescriptor, TransportError> {
        let manifest = WorkspaceManifest::capture(work_dir, &self.patterns, false)?;
        let bytes = build_archive(work_dir, &manifest)?;
        let sha256 = sha256_hex(&bytes);
        Ok(SnapshotDescriptor {
            snapshot_id: snapshot_id.to_string(),
            data: SnapshotData::Inline { data_base64: BASE64.encode(&bytes) },
            sha256,
            recommended,
            captured_at: Utc::now(),
        })
    }

    async fn detach(&mut self, _work_dir: &Path) -> Result<(), TransportError> {
        self.gate.begin_detach();
        Ok(())
    }

    async fn release(&mut self, work_dir: &Path) -> Result<(), TransportError> {
        if self.gate.begin_release()? {
            fsutil::remove_tree(work_dir)?;
        }
        Ok(())
    }

    fn phase(&self) -> CleanupPhase {
        self.gate.phase()
    }
}
