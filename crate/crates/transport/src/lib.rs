//! Workspace packaging and the pluggable transports that move a workspace
//! between delegator and executor.
//!
//! A transport is a pair of adapters. The delegator side packages an
//! admitted file set into a [`TransportHandle`](awcp_core::TransportHandle)
//! and later resolves snapshot descriptors back into file trees; the
//! executor side materializes the handle under the agreed lease mode and
//! captures snapshots of its workDir. Every adapter walks the same two-phase
//! cleanup: detach (disconnect the data channel), then release (reclaim
//! resources). Release before detach is a hard error; repeating either phase
//! is a no-op.
//!
//! Four transports ship by default: `archive` (inline base64 ZIP), `storage`
//! (pre-signed blob store URLs), `git` (delegation branch on a shared
//! remote), and `loopback-live` (same-host live projection). An `sshfs`
//! adapter for remote live mounts sits behind the `sshfs` cargo feature and
//! shells out to external tooling.

pub mod adapter;
pub mod adapters;
pub mod archive;
pub mod blobstore;
pub mod error;
pub mod fsutil;
pub mod manifest;
pub mod pattern;
pub mod reconcile;

pub use adapter::{
    check_prerequisites, delegator_transport, executor_transport, CleanupPhase,
    DelegatorTransport, DelegatorTransportConfig, ExecutorTransport, ExecutorTransportConfig,
    ResolvedSnapshot,
};
pub use archive::{build_archive, extract_archive, sha256_hex};
pub use blobstore::{BlobStore, BlobStoreClient, BlobStoreConfig};
pub use error::TransportError;
pub use manifest::{ManifestEntry, WorkspaceManifest};
pub use pattern::PatternSet;
pub use reconcile::{apply_tree, ChangeSummary};
