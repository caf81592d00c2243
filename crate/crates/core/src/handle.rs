//! Transport handles, capability flags, and snapshot descriptors.
//!
//! These are the data shapes that ride inside START messages and snapshot
//! events. The behaviour behind them (packaging, provisioning, capture,
//! reconciliation) lives in the transport crate; keeping the shapes here
//! lets the message codec stay self-contained.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

/// The projection mechanisms a delegator can choose from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransportKind {
    /// Workspace travels as a base64 ZIP inline in the START message.
    Archive,
    /// Workspace travels through a blob store via pre-signed URLs.
    Storage,
    /// Workspace travels as a dedicated branch on a shared git remote.
    Git,
    /// Same-host live projection: the executor works directly on the
    /// delegator's files. Stand-in for network filesystem mounts.
    LoopbackLive,
    /// Remote live projection over an sshfs mount (optional, external tools).
    Sshfs,
}

impl TransportKind {
    pub const ALL: [TransportKind; 5] = [
        TransportKind::Archive,
        TransportKind::Storage,
        TransportKind::Git,
        TransportKind::LoopbackLive,
        TransportKind::Sshfs,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TransportKind::Archive => "archive",
            TransportKind::Storage => "storage",
            TransportKind::Git => "git",
            TransportKind::LoopbackLive => "loopback-live",
            TransportKind::Sshfs => "sshfs",
        }
    }
}

impl std::fmt::Display for TransportKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TransportKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown transport kind `{s}`"))
    }
}

/// What a transport can and cannot do, fixed per kind.
///
/// At least one of the two flags is always set: a transport with neither
/// live sync nor snapshots would give the delegator no way to ever see the
/// executor's work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TransportCapabilities {
    /// Writes on one side are visible on the other without any transfer step.
    pub live_sync: bool,
    /// The executor can capture and ship point-in-time workspace snapshots.
    pub supports_snapshots: bool,
}

impl TransportCapabilities {
    pub fn is_coherent(&self) -> bool {
        self.live_sync || self.supports_snapshots
    }
}

/// Static capability table.
pub fn capabilities_for(kind: TransportKind) -> TransportCapabilities {
    match kind {
        TransportKind::Archive | TransportKind::Storage | TransportKind::Git => {
            TransportCapabilities { live_sync: false, supports_snapshots: true }
        }
        TransportKind::LoopbackLive | TransportKind::Sshfs => {
            TransportCapabilities { live_sync: true, supports_snapshots: false }
        }
    }
}

/// Everything the executor needs to materialize the projected workspace,
/// tagged by transport kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", rename_all_fields = "camelCase")]
pub enum TransportHandle {
    Archive {
        /// Base64 of the deterministic workspace ZIP.
        data_base64: String,
        /// Hex SHA-256 of the raw ZIP bytes, checked before extraction.
        sha256: String,
    },
    Storage {
        /// Pre-signed GET for the workspace archive.
        download_url: String,
        /// Pre-signed prefix (PUT + GET) under which the executor parks
        /// snapshot archives.
        upload_url: String,
        sha256: String,
    },
    Git {
        remote_url: String,
        /// Delegation-scoped branch, `awcp/<delegationId>`.
        branch: String,
        /// Commit the executor must find at the branch tip; doubles as the
        /// integrity reference.
        base_commit: String,
    },
    LoopbackLive {
        /// Absolute path of the delegator-side workspace root.
        origin_path: String,
    },
    Sshfs {
        host: String,
        port: u16,
        username: String,
        remote_path: String,
    },
}

impl TransportHandle {
    pub fn kind(&self) -> TransportKind {
        match self {
            TransportHandle::Archive { .. } => TransportKind::Archive,
            TransportHandle::Storage { .. } => TransportKind::Storage,
            TransportHandle::Git { .. } => TransportKind::Git,
            TransportHandle::LoopbackLive { .. } => TransportKind::LoopbackLive,
            TransportHandle::Sshfs { .. } => TransportKind::Sshfs,
        }
    }
}

/// Where the bytes of one snapshot live.
///
/// Untagged on the wire: the field sets are disjoint, so the shape itself
/// identifies the variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged, rename_all_fields = "camelCase")]
pub enum SnapshotData {
    /// ZIP bytes inline, base64.
    Inline { data_base64: String },
    /// Pre-signed GET for a ZIP parked in the blob store.
    Storage { url: String },
    /// A commit on the delegation branch.
    Git { remote_url: String, branch: String, commit: String },
}

/// One point-in-time capture of the executor's workDir, as announced on the
/// event stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SnapshotDescriptor {
    pub snapshot_id: String,
    pub data: SnapshotData,
    /// Integrity reference the delegator must verify before applying: hex
    /// SHA-256 of the ZIP bytes, or the commit id for git-shaped data.
    pub sha256: String,
    /// Set on the final capture taken just before DONE; reviewers use it to
    /// tell the result snapshot from mid-run checkpoints.
    #[serde(default)]
    pub recommended: bool,
    pub captured_at: DateTime<Utc>,
}
