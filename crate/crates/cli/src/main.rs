//! `awcp`: delegate workspace tasks to executor nodes, or be one.

mod commands;
mod config;
mod lock;

use awcp_core::{LeaseMode, TransportKind};
use awcp_sdk::SnapshotPolicy;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "awcp", version, about = "Delegate workspace tasks to executor nodes over HTTP")]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Delegation state directory.
    #[arg(long, global = true, env = "AWCP_STATE_DIR", value_name = "DIR")]
    state_dir: Option<PathBuf>,
    /// Emit machine-readable JSON instead of prose.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the executor service described by the config file.
    Serve,
    /// Project a workspace to an executor and run one task to completion.
    Delegate(DelegateArgs),
    /// Show one delegation in full, or list all of them.
    Status {
        delegation_id: Option<String>,
    },
    /// List, apply, or drop staged snapshots.
    Snapshots {
        #[command(subcommand)]
        action: SnapshotsAction,
    },
    /// Cancel a delegation on both sides.
    Cancel {
        delegation_id: String,
    },
    /// Reload persisted delegations and resume any that were mid-flight.
    Recover,
    /// Run the embedded blob store used by the storage transport.
    Blobstore(BlobstoreArgs),
}

#[derive(Args)]
pub struct DelegateArgs {
    /// Directory to project to the executor.
    #[arg(long)]
    workspace: PathBuf,
    /// What the executor should do, in prose.
    #[arg(long)]
    task: String,
    /// Prompt handed to the backend; defaults to the task text.
    #[arg(long)]
    prompt: Option<String>,
    /// Executor base URL, e.g. http://127.0.0.1:8787.
    #[arg(long)]
    executor: String,
    /// How the workspace travels: archive, storage, git, loopback-live, or
    /// sshfs.
    #[arg(long, default_value = "archive")]
    transport: TransportKind,
    /// Lease time-to-live in seconds.
    #[arg(long, default_value_t = 300)]
    ttl: u64,
    /// Lease access mode: read-only or read-write.
    #[arg(long, default_value = "read-write")]
    mode: LeaseMode,
    /// What happens to incoming snapshots: auto, staged, or discard.
    #[arg(long, default_value = "auto")]
    policy: SnapshotPolicy,
    /// Include pattern, repeatable; everything when omitted.
    #[arg(long = "resource", value_name = "PATTERN")]
    resources: Vec<String>,
    /// Exclude pattern, repeatable.
    #[arg(long = "exclude", value_name = "PATTERN")]
    excludes: Vec<String>,
    /// Print every event as it happens.
    #[arg(long)]
    watch: bool,
}

#[derive(Subcommand)]
pub enum SnapshotsAction {
    /// Show staged snapshots for one delegation.
    List { delegation_id: String },
    /// Apply one staged snapshot to the workspace.
    Approve { delegation_id: String, snapshot_id: String },
    /// Drop one staged snapshot without applying it.
    Discard { delegation_id: String, snapshot_id: String },
}

#[derive(Args)]
pub struct BlobstoreArgs {
    /// Address to bind.
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
    /// Admin credential; generated when omitted.
    #[arg(long)]
    admin_token: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();

    let config = match config::CliConfig::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::FAILURE;
        }
    };
    let state_dir = config.resolve_state_dir(cli.state_dir);
    let out = commands::Out::new(cli.json);

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime");
    let result = runtime.block_on(async {
        match cli.command {
            Command::Serve => commands::serve(&out, &config, &state_dir).await,
            Command::Delegate(args) => commands::delegate(&out, &config, &state_dir, args).await,
            Command::Status { delegation_id } => {
                commands::status(&out, &state_dir, delegation_id).await
            }
            Command::Snapshots { action } => {
                commands::snapshots(&out, &config, &state_dir, action).await
            }
            Command::Cancel { delegation_id } => {
                commands::cancel(&out, &config, &state_dir, &delegation_id).await
            }
            Command::Recover => commands::recover(&out, &config, &state_dir).await,
            Command::Blobstore(args) => commands::blobstore(&out, args).await,
        }
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
