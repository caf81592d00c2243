//! Sshfs live transport for nodes on different hosts. The delegator exports
//! its workspace path over SSH; the executor FUSE-mounts it at the workDir,
//! so every write is immediately a write on the delegator's filesystem.
//! Mount and unmount shell out to `sshfs` and `fusermount`, which is what
//! the prerequisite check probes for.
//!
//! Like loopback-live, continuous sync makes snapshots redundant, so both
//! capture and resolve refuse.

use crate::adapter::{
    CleanupPhase, DelegatorTransport, ExecutorTransport, PhaseGate, ResolvedSnapshot,
};
use crate::error::TransportError;
use crate::manifest::WorkspaceManifest;
use awcp_core::{LeaseMode, SnapshotDescriptor, TransportHandle, TransportKind};
use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::process::Stdio;

/// How executors reach this delegator's filesystem over SSH.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SshfsExport {
    pub host: String,
    pub port: u16,
    pub username: String,
}

async fn run(program: &str, args: &[&str]) -> Result<String, TransportError> {
    let out = tokio::process::Command::new(program)
        .args(args)
        .stdin(Stdio::null())
        .output()
        .await
        .map_err(|e| TransportError::Unavailable(format!("{program} not runnable: {e}")))?;
    if !out.status.success() {
        return Err(TransportError::Command {
            command: format!("{program} {}", args.join(" ")),
            detail: String::from_utf8_lossy(&out.stderr).trim().to_string(),
        });
    }
    Ok(String::from_utf8_lossy(&out.stdout).trim().to_string())
}

pub async fn check_sshfs_available() -> Result<(), TransportError> {
    run("sshfs", &["--version"]).await.map(|_| ())
}

pub struct SshfsDelegator {
    export: SshfsExport,
    gate: PhaseGate,
}

impl SshfsDelegator {
    pub fn new(export: SshfsExport) -> Self {
        SshfsDelegator { export, gate: PhaseGate::new() }
    }
}

#[async_trait]
impl DelegatorTransport for SshfsDelegator {
    fn kind(&self) -> TransportKind {
        TransportKind::Sshfs
    }

    async fn package(
        &mut self,
        workspace_root: &Path,
        _manifest: &WorkspaceManifest,
    ) -> Result<TransportHandle, TransportError> {
        let root = workspace_root
            .canonicalize()
            .map_err(TransportError::io("canonicalize export root"))?;
        let remote_path = root
            .to_str()
            .ok_or_else(|| TransportError::NonUtf8Path(root.clone()))?
            .to_string();
        Ok(TransportHandle::Sshfs {
            host: self.export.host.clone(),
            port: self.export.port,
            username: self.export.username.clone(),
            remote_path,
        })
    }

    async fn resolve_snapshot(
        &mut self,
        descriptor: &SnapshotDescriptor,
    ) -> Result<ResolvedSnapshot, TransportError> {
        Err(TransportError::Unavailable(format!(
            "sshfs is continuously synchronized; snapshot {} has nothing to resolve",
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

pub struct SshfsExecutor {
    mounted_at: Option<std::path::PathBuf>,
    gate: PhaseGate,
}

impl SshfsExecutor {
    pub fn new() -> Self {
        SshfsExecutor { mounted_at: None, gate: PhaseGate::new() }
    }

    async fn unmount(&mut self) -> Result<(), TransportError> {
        let Some(mount) = self.mounted_at.take() else { return Ok(()) };
        let target = mount.to_string_lossy().to_string();
        // fusermount3 on current FUSE installs, fusermount on older ones.
        for unmounter in ["fusermount3", "fusermount"] {
            if run(unmounter, &["-u", &target]).await.is_ok() {
                return Ok(());
            }
        }
        run("umount", &[target.as_str()]).await.map(|_| ())
    }
}

impl Default for SshfsExecutor {
    fn default() -> Self {
        Self::new()
    }
}

#[async_trait]
impl ExecutorTransport for SshfsExecutor {
    fn kind(&self) -> TransportKind {
        TransportKind::Sshfs
    }

    async fn provision(
        &mut self,
        handle: &TransportHandle,
        work_dir: &Path,
        mode: LeaseMode,
    ) -> Result<(), TransportError> {
        let TransportHandle::Sshfs { host, port, username, remote_path } = handle else {
            return Err(TransportError::HandleMismatch {
                handle: handle.kind().to_string(),
                adapter: "sshfs".into(),
            });
        };
        check_sshfs_available().await?;

        let spec = format!("{username}@{host}:{remote_path}");
        let port_arg = port.to_string();
        let target = work_dir
            .to_str()
            .ok_or_else(|| TransportError::NonUtf8Path(work_dir.to_path_buf()))?;
        let mut args = vec![
            spec.as_str(),
            target,
            "-p",
            port_arg.as_str(),
            "-o",
            "reconnect",
            "-o",
            "BatchMode=yes",
        ];
        if mode == LeaseMode::ReadOnly {
            // The kernel enforces the lease mode at the mount boundary.
            args.extend(["-o", "ro"]);
        }
        run("sshfs", &args).await?;
        self.mounted_at = Some(work_dir.to_path_buf());
        Ok(())
    }

    async fn capture_snapshot(
        &mut self,
        _work_dir: &Path,
        snapshot_id: &str,
        _recommended: bool,
    ) -> Result<SnapshotDescriptor, TransportError> {
        Err(TransportError::Unavailable(format!(
            "sshfs is continuously synchronized; snapshot {snapshot_id} not captured"
        )))
    }

    async fn detach(&mut self, _work_dir: &Path) -> Result<(), TransportError> {
        if self.gate.begin_detach() {
            self.unmount().await?;
        }
        Ok(())
    }

    async fn release(&mut self, work_dir: &Path) -> Result<(), TransportError> {
        if self.gate.begin_release()? {
            // Never delete through a still-active mount.
            self.unmount().await?;
            crate::fsutil::remove_tree(work_dir)?;
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

    #[tokio::test]
    async fn handle_names_the_exported_root() {
        let ws = tempfile::tempdir().unwrap();
        let export =
            SshfsExport { host: "delegator.example".into(), port: 2222, username: "agent".into() };
        let mut delegator = SshfsDelegator::new(export);
        let manifest = WorkspaceManifest::capture(
            ws.path(),
            &crate::pattern::PatternSet::everything(),
            false,
        )
        .unwrap();
        let handle = delegator.package(ws.path(), &manifest).await.unwrap();
        let TransportHandle::Sshfs { host, port, username, remote_path } = handle else {
            panic!("wrong handle kind");
        };
        assert_eq!(host, "delegator.example");
        assert_eq!(port, 2222);
        assert_eq!(username, "agent");
        assert_eq!(remote_path, ws.path().canonicalize().unwrap().to_string_lossy());
    }

    #[tokio::test]
    async fn snapshots_are_refused_in_both_directions() {
        let mut executor = SshfsExecutor::new();
        let ws = tempfile::tempdir().unwrap();
        let err = executor.capture_snapshot(ws.path(), "s-1", true).await.unwrap_err();
        assert!(matches!(err, TransportError::Unavailable(_)));

        let export =
            SshfsExport { host: "h".into(), port: 22, username: "u".into() };
        let mut delegator = SshfsDelegator::new(export);
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
    async fn foreign_handles_are_rejected_before_any_mount_attempt() {
        let ws = tempfile::tempdir().unwrap();
        let mut executor = SshfsExecutor::new();
        let handle = TransportHandle::LoopbackLive { origin_path: "/tmp".into() };
        let err = executor
            .provision(&handle, ws.path(), LeaseMode::ReadWrite)
            .await
            .unwrap_err();
        assert!(matches!(err, TransportError::HandleMismatch { .. }));
    }
}
