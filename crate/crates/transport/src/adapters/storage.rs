//! Storage transport: archives park in a blob store and pre-signed URLs
//! travel instead of bytes. START stays small regardless of workspace size,
//! and the executor needs no credential beyond the URLs themselves.
//!
//! Layout under the store: `awcp/<delegationId>/workspace.zip` for the
//! outbound projection, `awcp/<delegationId>/<snapshotId>.zip` for
//! snapshots. The delegator owns the delegation prefix and deletes it at
//! release.

use crate::adapter::{
    CleanupPhase, DelegatorTransport, ExecutorTransport, PhaseGate, ResolvedSnapshot,
};
use crate::archive::{build_archive, extract_archive, sha256_hex};
use crate::blobstore::{http_get_bytes, http_put_bytes, BlobStoreClient};
use crate::error::TransportError;
use crate::fsutil;
use crate::manifest::WorkspaceManifest;
use crate::pattern::PatternSet;
use awcp_core::{LeaseMode, SnapshotData, SnapshotDescriptor, TransportHandle, TransportKind};
use async_trait::async_trait;
use chrono::Utc;
use std::path::Path;

/// Grants outlive the longest plausible lease rather than being tied to it:
/// a lease can be activated well after packaging, and an expired download
/// URL would strand an otherwise valid delegation.
const GRANT_TTL_SECONDS: u64 = 24 * 60 * 60;

pub struct StorageDelegator {
    client: BlobStoreClient,
    delegation_id: String,
    gate: PhaseGate,
}

impl StorageDelegator {
    pub fn new(client: BlobStoreClient, delegation_id: String) -> Self {
        StorageDelegator { client, delegation_id, gate: PhaseGate::new() }
    }

    fn prefix(&self) -> String {
        format!("awcp/{}/", self.delegation_id)
    }
}

#[async_trait]
impl DelegatorTransport for StorageDelegator {
    fn kind(&self) -> TransportKind {
        TransportKind::Storage
    }

    async fn package(
        &mut self,
        workspace_root: &Path,
        manifest: &WorkspaceManifest,
    ) -> Result<TransportHandle, TransportError> {
        let bytes = build_archive(workspace_root, manifest)?;
        let sha256 = sha256_hex(&bytes);

        let grant = self
            .client
            .sign(&self.prefix(), &["PUT", "GET"], GRANT_TTL_SECONDS)
            .await?;
        let workspace_path = format!("{}workspace.zip", self.prefix());
        let download_url = self.client.signed_url(&workspace_path, &grant);
        self.client.put_url(&download_url, bytes).await?;

        // The upload URL is the prefix itself; the executor appends
        // `<snapshotId>.zip` before the query string.
        let upload_url = self.client.signed_url(self.prefix().trim_end_matches('/'), &grant);
        Ok(TransportHandle::Storage { download_url, upload_url, sha256 })
    }

    async fn resolve_snapshot(
        &mut self,
        descriptor: &SnapshotDescriptor,
    ) -> Result<ResolvedSnapshot, TransportError> {
        let SnapshotData::Storage { url } = &descriptor.data else {
            return Err(TransportError::HandleMismatch {
                handle: "non-storage snapshot data".into(),
                adapter: "storage".into(),
            });
        };
        let bytes = self.client.get_url(url).await?;
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
        if self.gate.begin_release()? {
            self.client.delete_prefix(&self.prefix()).await?;
        }
        Ok(())
    }

    fn phase(&self) -> CleanupPhase {
        self.gate.phase()
    }
}

/// Splice a file name into a pre-signed prefix URL, keeping the query.
fn url_join(prefix_url: &str, name: &str) -> String {
    match prefix_url.split_once('?') {
        Some((path, query)) => format!("{}/{}?{}", path.trim_end_matches('/'), name, query),
        None => format!("{}/{}", prefix_url.trim_end_matches('/'), name),
    }
}

pub struct StorageExecutor {
    patterns: PatternSet,
    upload_url: Option<String>,
    gate: PhaseGate,
}

impl StorageExecutor {
    pub fn new(patterns: PatternSet) -> Self {
        StorageExecutor { patterns, upload_url: None, gate: PhaseGate::new() }
    }
}

#[async_trait]
impl ExecutorTransport for StorageExecutor {
    fn kind(&self) -> TransportKind {
        TransportKind::Storage
    }

    async fn provision(
        &mut self,
        handle: &TransportHandle,
        work_dir: &Path,
        mode: LeaseMode,
    ) -> Result<(), TransportError> {
        let TransportHandle::Storage { download_url, upload_url, sha256 } = handle else {
            return Err(TransportError::HandleMismatch {
                handle: handle.kind().to_string(),
                adapter: "storage".into(),
            });
        };
        let bytes = http_get_bytes(download_url).await?;
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
        self.upload_url = Some(upload_url.clone());
        Ok(())
    }

    async fn capture_snapshot(
        &mut self,
        work_dir: &Path,
        snapshot_id: &str,
        recommended: bool,
    ) -> Result<SnapshotDescriptor, TransportError> {
        let upload_url = self.upload_url.clone().ok_or_else(|| {
            TransportError::Unavailable("capture before provision on storage transport".into())
        })?;
        let manifest = WorkspaceManifest::capture(work_dir, &self.patterns, false)?;
        let bytes = build_archive(work_dir, &manifest)?;
        let sha256 = sha256_hex(&bytes);
        let url = url_join(&upload_url, &format!("{snapshot_id}.zip"));
        http_put_bytes(&url, bytes).await?;
        Ok(SnapshotDescriptor {
            snapshot_id: snapshot_id.to_string(),
            data: SnapshotData::Storage { url },
            sha256,
            recommended,
            captured_at: Utc::now(),
        })
    }

    async fn detach(&mut self, _work_dir: &Path) -> Result<(), TransportError> {
        if self.gate.begin_detach() {
            self.upload_url = None;
        }
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blobstore::{BlobStore, BlobStoreConfig};
    use std::fs;

    #[test]
    fn url_join_splices_before_the_query() {
        assert_eq!(
            url_join("http://h/blobs/awcp/d-1?token=t&expiresAt=5", "s-1.zip"),
            "http://h/blobs/awcp/d-1/s-1.zip?token=t&expiresAt=5"
        );
        assert_eq!(url_join("http://h/blobs/p/", "x.zip"), "http://h/blobs/p/x.zip");
    }

    async fn rig() -> (BlobStoreClient, tokio::task::JoinHandle<()>) {
        let store = BlobStore::new("admin");
        let (addr, handle) = store.serve().await.unwrap();
        let client = BlobStoreClient::new(BlobStoreConfig {
            base_url: format!("http://{addr}"),
            admin_token: "admin".into(),
        });
        (client, handle)
    }

    #[tokio::test]
    async fn full_cycle_through_the_blob_store() {
        let (client, server) = rig().await;
        let ws = tempfile::tempdir().unwrap();
        fs::write(ws.path().join("input.txt"), "payload").unwrap();
        let manifest =
            WorkspaceManifest::capture(ws.path(), &PatternSet::everything(), false).unwrap();

        let mut delegator = StorageDelegator::new(client.clone(), "d-7".into());
        let handle = delegator.package(ws.path(), &manifest).await.unwrap();

        let work = tempfile::tempdir().unwrap();
        let mut executor = StorageExecutor::new(PatternSet::everything());
        executor.provision(&handle, work.path(), LeaseMode::ReadWrite).await.unwrap();
        assert_eq!(fs::read_to_string(work.path().join("input.txt")).unwrap(), "payload");

        fs::write(work.path().join("output.txt"), "result").unwrap();
        let descriptor = executor.capture_snapshot(work.path(), "s-1", true).await.unwrap();
        let resolved = delegator.resolve_snapshot(&descriptor).await.unwrap();
        assert_eq!(fs::read_to_string(resolved.root().join("output.txt")).unwrap(), "result");

        // Release wipes the delegation prefix: the workspace blob and the
        // snapshot blob both disappear.
        executor.detach(work.path()).await.unwrap();
        executor.release(work.path()).await.unwrap();
        delegator.detach().await.unwrap();
        delegator.release().await.unwrap();
        let SnapshotData::Storage { url } = &descriptor.data else { unreachable!() };
        assert!(client.get_url(url).await.is_err());
        assert!(!work.path().exists());
        server.abort();
    }

    #[tokio::test]
    async fn tampered_blob_fails_provision() {
        let (client, server) = rig().await;
        let ws = tempfile::tempdir().unwrap();
        fs::write(ws.path().join("input.txt"), "payload").unwrap();
        let manifest =
            WorkspaceManifest::capture(ws.path(), &PatternSet::everything(), false).unwrap();

        let mut delegator = StorageDelegator::new(client.clone(), "d-8".into());
        let handle = delegator.package(ws.path(), &manifest).await.unwrap();

        // Overwrite the parked blob after signing.
        let TransportHandle::Storage { download_url, .. } = &handle else { unreachable!() };
        client.put_url(download_url, b"not the zip".to_vec()).await.unwrap();

        let work = tempfile::tempdir().unwrap();
        let mut executor = StorageExecutor::new(PatternSet::everything());
        let err = executor
            .provision(&handle, work.path(), LeaseMode::ReadWrite)
            .await
            .unwrap_err();
        assert!(matches!(err, TransportError::IntegrityMismatch(_)));
        server.abort();
    }
}
