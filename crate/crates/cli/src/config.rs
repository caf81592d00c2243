//! JSON configuration file: one document provisions either role. Flags and
//! environment variables override file values; every field has a default
//! except the executor block, which `serve` requires.

use anyhow::{bail, Context, Result};
use awcp_core::{LeaseMode, TransportKind};
use awcp_sdk::{AdmissionPolicy, Backend, CommandBackend, ExecutorConfig, HttpCallbackBackend};
use awcp_transport::{BlobStoreConfig, DelegatorTransportConfig};
use serde::Deserialize;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Delegator,
    Executor,
}

#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct CliConfig {
    pub role: Option<Role>,
    pub state_dir: Option<PathBuf>,
    /// Bearer token: the delegator sends it, the executor requires it.
    pub auth_token: Option<String>,
    /// Projection gate for the delegator role. Without one, delegate falls
    /// back to a permissive policy rooted at the delegated workspace.
    pub admission: Option<AdmissionPolicy>,
    #[serde(default)]
    pub transport: TransportBlock,
    pub invitation_deadline_seconds: Option<u64>,
    pub executor: Option<ExecutorBlock>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct TransportBlock {
    pub git_remote_url: Option<String>,
    pub blob_store_url: Option<String>,
    pub blob_store_admin_token: Option<String>,
    pub archive_max_bytes: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ExecutorBlock {
    /// Socket address to serve on, e.g. "127.0.0.1:8787".
    pub listen: String,
    pub backend: BackendBlock,
    /// Where per-assignment work directories live; `<stateDir>/work` when
    /// unset.
    pub work_dir_base: Option<PathBuf>,
    pub max_ttl_seconds: Option<u64>,
    pub allowed_modes: Option<Vec<String>>,
    pub accepted_transport_kinds: Option<Vec<String>>,
    pub max_concurrent_assignments: Option<usize>,
    pub snapshot_interval_seconds: Option<u64>,
    pub ack_timeout_seconds: Option<u64>,
    pub pending_timeout_seconds: Option<u64>,
}

/// How the executor turns an assignment into work: a local command or an
/// HTTP callback. The variants are distinguished by their fields.
#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all_fields = "camelCase", untagged)]
pub enum BackendBlock {
    Command {
        program: String,
        #[serde(default)]
        args: Vec<String>,
    },
    Callback {
        callback_url: String,
    },
}

impl BackendBlock {
    pub fn build(&self) -> Arc<dyn Backend> {
        match self {
            BackendBlock::Command { program, args } => {
                Arc::new(CommandBackend::new(program.as_str()).with_args(args.clone()))
            }
            BackendBlock::Callback { callback_url } => {
                Arc::new(HttpCallbackBackend::new(callback_url.as_str()))
            }
        }
    }
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<CliConfig> {
        let Some(path) = path else { return Ok(CliConfig::default()) };
        let raw = std::fs::read_to_string(path)
            .with_context(|| format!("read config {}", path.display()))?;
        serde_json::from_str(&raw).with_context(|| format!("parse config {}", path.display()))
    }

    /// Flag (or env, which clap folds into the flag) wins over the file;
    /// the file wins over the built-in default.
    pub fn resolve_state_dir(&self, flag: Option<PathBuf>) -> PathBuf {
        flag.or_else(|| self.state_dir.clone()).unwrap_or_else(|| PathBuf::from(".awcp-state"))
    }

    /// Adapter settings for the delegator role. Blob store coordinates may
    /// also arrive via AWCP_BLOB_STORE_URL / AWCP_BLOB_STORE_ADMIN_TOKEN.
    pub fn delegator_transport(&self) -> DelegatorTransportConfig {
        let url = self
            .transport
            .blob_store_url
            .clone()
            .or_else(|| std::env::var("AWCP_BLOB_STORE_URL").ok());
        let token = self
            .transport
            .blob_store_admin_token
            .clone()
            .or_else(|| std::env::var("AWCP_BLOB_STORE_ADMIN_TOKEN").ok());
        DelegatorTransportConfig {
            git_remote_url: self.transport.git_remote_url.clone(),
            blob_store: match (url, token) {
                (Some(base_url), Some(admin_token)) => {
                    Some(BlobStoreConfig { base_url, admin_token })
                }
                _ => None,
            },
            archive_max_bytes: self.transport.archive_max_bytes,
            ..Default::default()
        }
    }

    /// Build the executor service configuration for `serve`.
    pub fn executor_config(&self, state_dir: &Path) -> Result<ExecutorConfig> {
        if self.role != Some(Role::Executor) {
            bail!("serve requires a config file with role \"executor\"");
        }
        let block = self.executor.as_ref().context("config is missing the executor block")?;
        let work_base =
            block.work_dir_base.clone().unwrap_or_else(|| state_dir.join("work"));
        let mut config = ExecutorConfig::new(work_base, block.backend.build());
        if let Some(n) = block.max_ttl_seconds {
            config.policy.max_ttl_seconds = n;
        }
        if let Some(modes) = &block.allowed_modes {
            config.policy.allowed_modes = modes
                .iter()
                .map(|m| m.parse::<LeaseMode>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(anyhow::Error::msg)?;
        }
        if let Some(kinds) = &block.accepted_transport_kinds {
            config.policy.accepted_transport_kinds = kinds
                .iter()
                .map(|k| k.parse::<TransportKind>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(anyhow::Error::msg)?;
        }
        if let Some(n) = block.max_concurrent_assignments {
            config.policy.max_concurrent_assignments = n;
        }
        if let Some(s) = block.snapshot_interval_seconds {
            config.snapshot_interval = Duration::from_secs(s);
        }
        if let Some(s) = block.ack_timeout_seconds {
            config.ack_timeout = Duration::from_secs(s);
        }
        if let Some(s) = block.pending_timeout_seconds {
            config.pending_timeout = Duration::from_secs(s);
        }
        config.auth_token = self.auth_token.clone();
        Ok(config)
    }

    pub fn listen_addr(&self) -> Result<std::net::SocketAddr> {
        let block = self.executor.as_ref().context("config is missing the executor block")?;
        block
            .listen
            .parse()
            .with_context(|| format!("listen address `{}` is not host:port", block.listen))
    }
}
