//! Adapter traits, the two-phase cleanup gate, and the factory functions
//! services use to obtain adapters by kind.

use crate::blobstore::{BlobStoreClient, BlobStoreConfig};
use crate::error::TransportError;
use crate::manifest::WorkspaceManifest;
use crate::pattern::PatternSet;
use awcp_core::{
    capabilities_for, EnvironmentDeclaration, LeaseMode, SnapshotDescriptor, TransportCapabilities,
    TransportHandle, TransportKind,
};
use async_trait::async_trait;
use std::path::{Path, PathBuf};
use tempfile::TempDir;

/// Cleanup progress of one adapter session.
///
/// `Active` -> `Detached` -> `Released`, strictly in that order. Detach
/// disconnects the data channel (unmount, drop clients, remove VCS links);
/// release reclaims what is left (temp trees, workDirs, remote branches,
/// parked blobs). Both are idempotent; release before detach is refused so
/// resources cannot be reclaimed while the channel could still touch them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CleanupPhase {
    Active,
    Detached,
    Released,
}

/// Shared enforcement of the phase order. Adapters call `begin_*` and only
/// do real work when it returns true.
#[derive(Debug)]
pub(crate) struct PhaseGate {
    phase: CleanupPhase,
}

impl PhaseGate {
    pub fn new() -> Self {
        PhaseGate { phase: CleanupPhase::Active }
    }

    pub fn phase(&self) -> CleanupPhase {
        self.phase
    }

    pub fn begin_detach(&mut self) -> bool {
        match self.phase {
            CleanupPhase::Active => {
                self.phase = CleanupPhase::Detached;
                true
            }
            CleanupPhase::Detached | CleanupPhase::Released => false,
        }
    }

    pub fn begin_release(&mut self) -> Result<bool, TransportError> {
        match self.phase {
            CleanupPhase::Active => Err(TransportError::ReleaseBeforeDetach),
            CleanupPhase::Detached => {
                self.phase = CleanupPhase::Released;
                Ok(true)
            }
            CleanupPhase::Released => Ok(false),
        }
    }
}

/// A snapshot fetched, integrity-checked, and unpacked into a temporary
/// tree, ready for reconciliation. Dropping it removes the tree.
#[derive(Debug)]
pub struct ResolvedSnapshot {
    dir: TempDir,
}

impl ResolvedSnapshot {
    pub(crate) fn new(dir: TempDir) -> Self {
        ResolvedSnapshot { dir }
    }

    pub fn root(&self) -> &Path {
        self.dir.path()
    }
}

/// Delegator side of one transport session, scoped to one delegation.
#[async_trait]
pub trait DelegatorTransport: Send + Sync {
    fn kind(&self) -> TransportKind;

    fn capabilities(&self) -> TransportCapabilities {
        capabilities_for(self.kind())
    }

    /// Package the admitted file set and mint the handle that ships in
    /// START. `manifest` is the admission-checked listing; adapters must
    /// not widen it.
    async fn package(
        &mut self,
        workspace_root: &Path,
        manifest: &WorkspaceManifest,
    ) -> Result<TransportHandle, TransportError>;

    /// Fetch the descriptor's bytes, verify integrity, unpack to a temp
    /// tree. Live transports have nothing to resolve and must refuse.
    async fn resolve_snapshot(
        &mut self,
        descriptor: &SnapshotDescriptor,
    ) -> Result<ResolvedSnapshot, TransportError>;

    async fn detach(&mut self) -> Result<(), TransportError>;

    async fn release(&mut self) -> Result<(), TransportError>;

    fn phase(&self) -> CleanupPhase;
}

/// Executor side of one transport session.
#[async_trait]
pub trait ExecutorTransport: Send + Sync {
    fn kind(&self) -> TransportKind;

    fn capabilities(&self) -> TransportCapabilities {
        capabilities_for(self.kind())
    }

    /// Materialize the projected workspace at `work_dir` (an existing empty
    /// directory) under the given lease mode. Read-only leases come out of
    /// provisioning with write bits stripped.
    async fn provision(
        &mut self,
        handle: &TransportHandle,
        work_dir: &Path,
        mode: LeaseMode,
    ) -> Result<(), TransportError>;

    /// Capture the current workDir state, ship it, and return the
    /// descriptor to announce on the event stream.
    async fn capture_snapshot(
        &mut self,
        work_dir: &Path,
        snapshot_id: &str,
        recommended: bool,
    ) -> Result<SnapshotDescriptor, TransportError>;

    async fn detach(&mut self, work_dir: &Path) -> Result<(), TransportError>;

    /// Reclaim the workDir and anything the adapter parked elsewhere.
    async fn release(&mut self, work_dir: &Path) -> Result<(), TransportError>;

    fn phase(&self) -> CleanupPhase;
}

/// Everything a delegator needs to construct adapters. Fields are optional
/// because not every deployment configures every transport.
#[derive(Debug, Clone, Default)]
pub struct DelegatorTransportConfig {
    /// Shared git remote (bare repo URL or path) for the git transport.
    pub git_remote_url: Option<String>,
    /// Blob store endpoint + admin credential for the storage transport.
    pub blob_store: Option<BlobStoreConfig>,
    /// Cap on inline archive size; START messages carry the archive in the
    /// JSON body, so this bounds message size too.
    pub archive_max_bytes: Option<u64>,
    /// How executors reach this host over SSH for sshfs mounts.
    #[cfg(feature = "sshfs")]
    pub sshfs_export: Option<crate::adapters::sshfs::SshfsExport>,
}

pub const DEFAULT_ARCHIVE_MAX_BYTES: u64 = 64 * 1024 * 1024;

/// Executor-side adapter knobs.
#[derive(Debug, Clone, Default)]
pub struct ExecutorTransportConfig {
    /// Where adapter scratch space lives; system temp when unset.
    pub temp_dir: Option<PathBuf>,
}

/// Construct the delegator-side adapter for `kind`.
pub fn delegator_transport(
    kind: TransportKind,
    delegation_id: &str,
    config: &DelegatorTransportConfig,
) -> Result<Box<dyn DelegatorTransport>, TransportError> {
    match kind {
        TransportKind::Archive => Ok(Box::new(crate::adapters::archive::ArchiveDelegator::new(
            config.archive_max_bytes.unwrap_or(DEFAULT_ARCHIVE_MAX_BYTES),
        ))),
        TransportKind::Storage => {
            let cfg = config.blob_store.clone().ok_or_else(|| {
                TransportError::Unavailable("storage transport requires a blob store endpoint".into())
            })?;
            Ok(Box::new(crate::adapters::storage::StorageDelegator::new(
                BlobStoreClient::new(cfg),
                delegation_id.to_string(),
            )))
        }
        TransportKind::Git => {
            let remote = config.git_remote_url.clone().ok_or_else(|| {
                TransportError::Unavailable("git transport requires a remote URL".into())
            })?;
            Ok(Box::new(crate::adapters::git::GitDelegator::new(
                remote,
                delegation_id.to_string(),
            )))
        }
        TransportKind::LoopbackLive => {
            Ok(Box::new(crate::adapters::loopback::LoopbackDelegator::new()))
        }
        #[cfg(feature = "sshfs")]
        TransportKind::Sshfs => {
            let export = config.sshfs_export.clone().ok_or_else(|| {
                TransportError::Unavailable("sshfs transport requires export configuration".into())
            })?;
            Ok(Box::new(crate::adapters::sshfs::SshfsDelegator::new(export)))
        }
        #[cfg(not(feature = "sshfs"))]
        TransportKind::Sshfs => Err(TransportError::Unavailable(
            "built without the `sshfs` feature".into(),
        )),
    }
}

/// Construct the executor-side adapter for `kind`. `environment` scopes
/// snapshot captures.
pub fn executor_transport(
    kind: TransportKind,
    environment: &EnvironmentDeclaration,
    config: &ExecutorTransportConfig,
) -> Result<Box<dyn ExecutorTransport>, TransportError> {
    let patterns = PatternSet::compile(environment)?;
    match kind {
        TransportKind::Archive => {
            Ok(Box::new(crate::adapters::archive::ArchiveExecutor::new(patterns)))
        }
        TransportKind::Storage => {
            Ok(Box::new(crate::adapters::storage::StorageExecutor::new(patterns)))
        }
        TransportKind::Git => Ok(Box::new(
            crate::adapters::git::GitExecutor::new(config.temp_dir.clone())
                .with_environment(environment.clone()),
        )),
        TransportKind::LoopbackLive => {
            Ok(Box::new(crate::adapters::loopback::LoopbackExecutor::new(patterns)))
        }
        #[cfg(feature = "sshfs")]
        TransportKind::Sshfs => Ok(Box::new(crate::adapters::sshfs::SshfsExecutor::new())),
        #[cfg(not(feature = "sshfs"))]
        TransportKind::Sshfs => Err(TransportError::Unavailable(
            "built without the `sshfs` feature".into(),
        )),
    }
}

/// Can this node act as an executor for `kind` right now? Checked while
/// deciding whether to accept an invitation, so failures surface as a
/// decline instead of a dead mid-flight delegation.
pub async fn check_prerequisites(kind: TransportKind) -> Result<(), TransportError> {
    match kind {
        TransportKind::Archive | TransportKind::Storage | TransportKind::LoopbackLive => Ok(()),
        TransportKind::Git => crate::adapters::git::check_git_available().await,
        #[cfg(feature = "sshfs")]
        TransportKind::Sshfs => crate::adapters::sshfs::check_sshfs_available().await,
        #[cfg(not(feature = "sshfs"))]
        TransportKind::Sshfs => Err(TransportError::Unavailable(
            "built without the `sshfs` feature".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_gate_enforces_order_and_idempotence() {
        let mut gate = PhaseGate::new();
        assert_eq!(gate.phase(), CleanupPhase::Active);

        // Release first: refused, phase unchanged.
        assert!(matches!(gate.begin_release(), Err(TransportError::ReleaseBeforeDetach)));
        assert_eq!(gate.phase(), CleanupPhase::Active);

        assert!(gate.begin_detach());
        assert!(!gate.begin_detach(), "second detach must be a no-op");
        assert_eq!(gate.phase(), CleanupPhase::Detached);

        assert_eq!(gate.begin_release().unwrap(), true);
        assert_eq!(gate.begin_release().unwrap(), false, "second release must be a no-op");
        assert!(!gate.begin_detach(), "detach after release stays a no-op");
        assert_eq!(gate.phase(), CleanupPhase::Released);
    }

    #[test]
    fn factories_refuse_unconfigured_backends() {
        let cfg = DelegatorTransportConfig::default();
        assert!(delegator_transport(TransportKind::Archive, "d", &cfg).is_ok());
        assert!(delegator_transport(TransportKind::LoopbackLive, "d", &cfg).is_ok());
        assert!(matches!(
            delegator_transport(TransportKind::Git, "d", &cfg),
            Err(TransportError::Unavailable(_))
        ));
        assert!(matches!(
            delegator_transport(TransportKind::Storage, "d", &cfg),
            Err(TransportError::Unavailable(_))
        ));
    }
}
