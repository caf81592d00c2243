//! One self-contained delegation environment under a private root: an origin
//! workspace, an executor service on an ephemeral port, whatever backing the
//! chosen transport needs (blob store, bare git remote), an optional fault
//! proxy in front of the executor, and a delegator service. Everything is
//! namespaced by the root so worlds can run in parallel without touching
//! each other.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use awcp_core::lifecycle::{AssignmentState, DelegationState};
use awcp_core::message::{EnvironmentDeclaration, LeaseConfig, LeaseMode, TaskSpec};
use awcp_core::TransportKind;
use awcp_sdk::admission::AdmissionPolicy;
use awcp_sdk::backend::CommandBackend;
use awcp_sdk::delegator::{DelegateRequest, DelegatorConfig, DelegatorService};
use awcp_sdk::executor::{ExecutorConfig, ExecutorService};
use awcp_sdk::routes::serve_executor;
use awcp_sdk::SnapshotPolicy;
use awcp_transport::{BlobStore, BlobStoreConfig, DelegatorTransportConfig};
use tokio::task::JoinHandle;

use crate::proxy::{FaultProxy, ProxyFaults};

/// Knobs for building a [`World`]. Defaults give a quiet archive-transport
/// environment with periodic snapshots disabled, so snapshot counts in
/// assertions stay deterministic.
#[derive(Debug, Clone)]
pub struct WorldConfig {
    pub root: PathBuf,
    pub transport: TransportKind,
    pub policy: SnapshotPolicy,
    pub mode: LeaseMode,
    pub ttl_seconds: u64,
    pub backend_script: String,
    pub auth_token: Option<String>,
    pub faults: ProxyFaults,
    pub fault_seed: u64,
    pub snapshot_interval: Duration,
    pub ack_timeout: Duration,
    pub pending_timeout: Duration,
}

impl WorldConfig {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        WorldConfig {
            root: root.into(),
            transport: TransportKind::Archive,
            policy: SnapshotPolicy::Auto,
            mode: LeaseMode::ReadWrite,
            ttl_seconds: 60,
            backend_script: "echo AWCP_SUMMARY: nothing to do".into(),
            auth_token: None,
            faults: ProxyFaults::default(),
            fault_seed: 0,
            snapshot_interval: Duration::ZERO,
            ack_timeout: Duration::from_secs(5),
            pending_timeout: Duration::from_secs(2),
        }
    }
}

/// A running pair of services plus their backing resources. Directories and
/// listeners live until [`World::shutdown`] or drop.
pub struct World {
    pub config: WorldConfig,
    pub origin: PathBuf,
    pub state_dir: PathBuf,
    pub work_base: PathBuf,
    pub scratch: PathBuf,
    pub executor: Arc<ExecutorService>,
    pub executor_addr: SocketAddr,
    pub endpoint: String,
    pub proxy: Option<FaultProxy>,
    pub blob_store: Option<BlobStore>,
    pub git_remote: Option<PathBuf>,
    pub delegator: Arc<DelegatorService>,
    executor_server: JoinHandle<()>,
    blob_server: Option<JoinHandle<()>>,
    delegator_transport: DelegatorTransportConfig,
}

impl World {
    pub async fn build(config: WorldConfig) -> anyhow::Result<World> {
        let root = config.root.clone();
        let origin = root.join("origin");
        let state_dir = root.join("state");
        let work_base = root.join("work");
        let scratch = root.join("scratch");
        for dir in [&origin, &state_dir, &work_base, &scratch] {
            std::fs::create_dir_all(dir)?;
        }

        let mut delegator_transport = DelegatorTransportConfig::default();
        let mut blob_store = None;
        let mut blob_server = None;
        let mut git_remote = None;
        match config.transport {
            TransportKind::Storage => {
                let admin_token = format!("admin-{}", config.fault_seed);
                let store = BlobStore::new(&admin_token);
                let (addr, server) = store.clone().serve().await?;
                delegator_transport.blob_store = Some(BlobStoreConfig {
                    base_url: format!("http://{addr}"),
                    admin_token,
                });
                blob_store = Some(store);
                blob_server = Some(server);
            }
            TransportKind::Git => {
                let remote = root.join("remote.git");
                init_bare_remote(&remote).await?;
                delegator_transport.git_remote_url =
                    Some(remote.display().to_string());
                git_remote = Some(remote);
            }
            TransportKind::Archive | TransportKind::LoopbackLive | TransportKind::Sshfs => {}
        }

        let backend = Arc::new(
            CommandBackend::new("/bin/sh")
                .with_args(vec!["-c".into(), config.backend_script.clone()]),
        );
        let mut executor_config = ExecutorConfig::new(&work_base, backend);
        executor_config.snapshot_interval = config.snapshot_interval;
        executor_config.ack_timeout = config.ack_timeout;
        executor_config.pending_timeout = config.pending_timeout;
        executor_config.auth_token = config.auth_token.clone();
        executor_config.transport.temp_dir = Some(scratch.clone());
        let executor = ExecutorService::new(executor_config);
        let (executor_addr, executor_server) =
            serve_executor(executor.clone(), "127.0.0.1:0".parse().unwrap()).await?;

        let proxy = if config.faults.is_active() {
            Some(FaultProxy::spawn(executor_addr, config.faults.clone(), config.fault_seed).await?)
        } else {
            None
        };
        let endpoint = proxy
            .as_ref()
            .map(|p| p.endpoint())
            .unwrap_or_else(|| format!("http://{executor_addr}"));

        let delegator = spawn_delegator(
            &state_dir,
            &origin,
            delegator_transport.clone(),
            config.auth_token.clone(),
        );

        Ok(World {
            config,
            origin,
            state_dir,
            work_base,
            scratch,
            executor,
            executor_addr,
            endpoint,
            proxy,
            blob_store,
            git_remote,
            delegator,
            executor_server,
            blob_server,
            delegator_transport,
        })
    }

    /// A launch request built from this world's configuration.
    pub fn request(&self, description: &str) -> DelegateRequest {
        DelegateRequest {
            workspace_root: self.origin.clone(),
            task: TaskSpec {
                description: description.into(),
                agent_prompt: format!("carry out: {description}"),
            },
            lease: LeaseConfig {
                ttl_seconds: self.config.ttl_seconds,
                mode: self.config.mode,
            },
            env: EnvironmentDeclaration::everything(),
            transport_kind: self.config.transport,
            executor_endpoint: self.endpoint.clone(),
            snapshot_policy: self.config.policy,
        }
    }

    /// Simulate a delegator process crash: drop the service without any
    /// teardown, then build a fresh one over the same state directory. The
    /// caller drives recovery explicitly.
    pub async fn rebuild_delegator(&mut self) {
        self.delegator.shutdown_abrupt();
        self.delegator = spawn_delegator(
            &self.state_dir,
            &self.origin,
            self.delegator_transport.clone(),
            self.config.auth_token.clone(),
        );
    }

    pub async fn wait_delegation_terminal(
        &self,
        delegation_id: &str,
        timeout: Duration,
    ) -> anyhow::Result<DelegationState> {
        let deadline = std::time::Instant::now() + timeout;
        loop {
            if let Some(record) = self.delegator.record(delegation_id).await {
                if record.is_terminal() {
                    return Ok(record.state);
                }
            }
            if std::time::Instant::now() >= deadline {
                let state = self
                    .delegator
                    .record(delegation_id)
                    .await
                    .map(|r| r.state.to_string())
                    .unwrap_or_else(|| "unknown".into());
                anyhow::bail!("delegation {delegation_id} still {state} after {timeout:?}");
            }
            tokio::time::sleep(Duration::from_millis(25)).await;
        }
    }

    /// Wait for the executor's assignment to terminate. `Ok(None)` means the
    /// executor never created one (the invitation never landed).
    pub async fn wait_assignment_terminal(
        &self,
        delegation_id: &str,
        timeout: Duration,
    ) -> anyhow::Result<Option<AssignmentState>> {
        let deadline = std::time::Instant::now() + timeout;
        loop {
            match self.executor.assignment_state(delegation_id).await {
                Some(state) if state.is_terminal() => return Ok(Some(state)),
                Some(state) => {
                    if std::time::Instant::now() >= deadline {
                        anyhow::bail!(
                            "assignment {delegation_id} still {state} after {timeout:?}"
                        );
                    }
                }
                None => return Ok(None),
            }
            tokio::time::sleep(Duration::from_millis(25)).await;
        }
    }

    /// Wait until the delegation reaches `target` (or any terminal state, so
    /// a missed window cannot hang the caller).
    pub async fn wait_delegation_state(
        &self,
        delegation_id: &str,
        target: DelegationState,
        timeout: Duration,
    ) -> DelegationState {
        let deadline = std::time::Instant::now() + timeout;
        loop {
            if let Some(record) = self.delegator.record(delegation_id).await {
                if record.state == target || record.is_terminal() {
                    return record.state;
                }
            }
            if std::time::Instant::now() >= deadline {
                return target;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }

    pub async fn shutdown(self) {
        self.delegator.shutdown_abrupt();
        self.executor.shutdown_graceful().await;
        self.executor_server.abort();
        if let Some(server) = self.blob_server {
            server.abort();
        }
    }
}

fn spawn_delegator(
    state_dir: &Path,
    origin: &Path,
    transport: DelegatorTransportConfig,
    auth_token: Option<String>,
) -> Arc<DelegatorService> {
    let mut config =
        DelegatorConfig::new(state_dir, AdmissionPolicy::permissive(origin));
    config.transport = transport;
    config.auth_token = auth_token;
    config.expiry_scan_interval = Duration::from_millis(200);
    DelegatorService::new(config)
}

async fn init_bare_remote(path: &Path) -> anyhow::Result<()> {
    let status = tokio::process::Command::new("git")
        .args(["init", "-q", "--bare"])
        .arg(path)
        .status()
        .await?;
    anyhow::ensure!(status.success(), "git init --bare failed for {}", path.display());
    Ok(())
}

/// Write a small deterministic origin tree: a text note, a nested source
/// file, and a data file whose bytes vary with the seed.
pub fn seed_origin(origin: &Path, seed: u64) -> std::io::Result<()> {
    std::fs::write(origin.join("notes.txt"), format!("run seed {seed}\n"))?;
    std::fs::create_dir_all(origin.join("src"))?;
    std::fs::write(
        origin.join("src/main.rs"),
        "fn main() {\n    println!(\"hello\");\n}\n",
    )?;
    let blob: Vec<u8> = (0..512u32).map(|i| ((i as u64 * 31 + seed) % 251) as u8).collect();
    std::fs::write(origin.join("data.bin"), blob)?;
    Ok(())
}
