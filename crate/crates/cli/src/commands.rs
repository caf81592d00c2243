//! Command implementations. Every command resolves its configuration the
//! same way (flags over file over defaults), prints through [`Out`] so
//! `--json` swaps prose for machine-readable lines, and exits 0 only when
//! the thing it was asked to observe actually succeeded.

use crate::config::CliConfig;
use crate::lock::StateLock;
use crate::{BlobstoreArgs, DelegateArgs, SnapshotsAction};
use anyhow::{bail, Context, Result};
use awcp_core::{
    DelegationState, EnvironmentDeclaration, LeaseConfig, ProtocolError, TaskSpec,
};
use awcp_sdk::{
    serve_executor, AdmissionPolicy, DelegateRequest, DelegationRecord, DelegatorConfig,
    DelegatorService, ExecutorService, Progress, ProgressKind,
};
use awcp_transport::BlobStore;
use chrono::SecondsFormat;
use serde_json::json;
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;
use tokio::sync::broadcast;

/// Another process holds the state directory.
pub const EXIT_BUSY: u8 = 2;
/// The delegation ended, but not in `completed`.
pub const EXIT_NOT_COMPLETED: u8 = 3;

pub struct Out {
    json: bool,
}

impl Out {
    pub fn new(json: bool) -> Self {
        Out { json }
    }

    fn line(&self, human: String, json: serde_json::Value) {
        if self.json {
            println!("{json}");
        } else {
            println!("{human}");
        }
    }

    fn protocol_error(&self, e: &ProtocolError) {
        let mut human = format!("error {}: {}", e.code.as_str(), e.message);
        if let Some(hint) = &e.hint {
            human.push_str(&format!(" ({hint})"));
        }
        self.line(human, json!({ "error": e }));
    }
}

async fn wait_for_signal() {
    let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate())
        .expect("SIGTERM handler installs");
    tokio::select! {
        _ = term.recv() => {}
        r = tokio::signal::ctrl_c() => { let _ = r; }
    }
}

fn acquire_lock(out: &Out, state_dir: &Path) -> Result<Option<StateLock>> {
    match StateLock::acquire(state_dir) {
        Ok(lock) => Ok(Some(lock)),
        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
            out.line(
                format!("state directory {} is in use by another process", state_dir.display()),
                json!({ "error": { "code": "BUSY", "stateDir": state_dir } }),
            );
            Ok(None)
        }
        Err(e) => Err(e).with_context(|| format!("lock {}", state_dir.display())),
    }
}

fn delegator_service(config: &CliConfig, state_dir: &Path, admission: AdmissionPolicy) -> Arc<DelegatorService> {
    let mut dcfg = DelegatorConfig::new(state_dir, admission);
    dcfg.transport = config.delegator_transport();
    dcfg.auth_token = config.auth_token.clone();
    if let Some(secs) = config.invitation_deadline_seconds {
        dcfg.invitation_deadline = Duration::from_secs(secs);
    }
    DelegatorService::new(dcfg)
}

/// Run the executor service until SIGTERM or Ctrl-C, then detach every
/// live assignment before exiting.
pub async fn serve(out: &Out, config: &CliConfig, state_dir: &Path) -> Result<ExitCode> {
    let exec_config = config.executor_config(state_dir)?;
    let addr = config.listen_addr()?;
    let service = ExecutorService::new(exec_config);
    let (bound, _server) = serve_executor(service.clone(), addr)
        .await
        .with_context(|| format!("bind {addr}"))?;
    out.line(
        format!("listening on http://{bound}"),
        json!({ "listening": format!("http://{bound}") }),
    );
    wait_for_signal().await;
    out.line("shutting down".into(), json!({ "shuttingDown": true }));
    service.shutdown_graceful().await;
    Ok(ExitCode::SUCCESS)
}

fn print_progress(out: &Out, watch: bool, ev: &Progress) {
    if !watch {
        return;
    }
    let id = &ev.delegation_id;
    match &ev.kind {
        ProgressKind::StateChanged { from, event, to } => out.line(
            format!("{} --{}--> {}", from.as_str(), event.as_str(), to.as_str()),
            json!({ "delegationId": id, "from": from, "event": event.as_str(), "to": to }),
        ),
        ProgressKind::BackendNote { detail } => out.line(
            format!("note: {detail}"),
            json!({ "delegationId": id, "note": detail }),
        ),
        ProgressKind::SnapshotApplied { snapshot_id, changed } => out.line(
            format!("snapshot {snapshot_id} applied ({changed} paths changed)"),
            json!({ "delegationId": id, "snapshotApplied": snapshot_id, "changed": changed }),
        ),
        ProgressKind::SnapshotQueued { snapshot_id } => out.line(
            format!("snapshot {snapshot_id} staged for review"),
            json!({ "delegationId": id, "snapshotQueued": snapshot_id }),
        ),
        ProgressKind::SnapshotDiscarded { snapshot_id } => out.line(
            format!("snapshot {snapshot_id} discarded"),
            json!({ "delegationId": id, "snapshotDiscarded": snapshot_id }),
        ),
        ProgressKind::AckSent => out.line(
            "completion acknowledged".into(),
            json!({ "delegationId": id, "ack": true }),
        ),
    }
}

fn finish(out: &Out, record: &DelegationRecord) -> ExitCode {
    if record.state == DelegationState::Completed {
        let summary = record
            .final_summary
            .as_ref()
            .map(|d| d.final_summary.clone())
            .unwrap_or_default();
        out.line(
            format!("completed: {summary}"),
            json!({
                "delegationId": record.delegation_id,
                "state": record.state,
                "finalSummary": record.final_summary,
            }),
        );
        return ExitCode::SUCCESS;
    }
    if let Some(e) = &record.last_error {
        out.protocol_error(e);
    }
    out.line(
        format!("terminal state: {}", record.state.as_str()),
        json!({
            "delegationId": record.delegation_id,
            "state": record.state,
            "lastError": record.last_error,
        }),
    );
    ExitCode::from(EXIT_NOT_COMPLETED)
}

fn drain_progress(
    out: &Out,
    watch: bool,
    rx: &mut broadcast::Receiver<Progress>,
) {
    loop {
        match rx.try_recv() {
            Ok(ev) => print_progress(out, watch, &ev),
            Err(broadcast::error::TryRecvError::Lagged(_)) => continue,
            Err(_) => break,
        }
    }
}

/// Project the workspace, run the task to a terminal state, and exit 0
/// only on `completed`.
pub async fn delegate(
    out: &Out,
    config: &CliConfig,
    state_dir: &Path,
    args: DelegateArgs,
) -> Result<ExitCode> {
    let Some(_lock) = acquire_lock(out, state_dir)? else {
        return Ok(ExitCode::from(EXIT_BUSY));
    };
    let admission = config
        .admission
        .clone()
        .unwrap_or_else(|| AdmissionPolicy::permissive(args.workspace.clone()));
    let service = delegator_service(config, state_dir, admission);
    let mut progress = service.subscribe_progress();

    let resources =
        if args.resources.is_empty() { vec!["**".to_string()] } else { args.resources };
    let request = DelegateRequest {
        workspace_root: args.workspace,
        task: TaskSpec {
            description: args.task.clone(),
            agent_prompt: args.prompt.unwrap_or(args.task),
        },
        lease: LeaseConfig { ttl_seconds: args.ttl, mode: args.mode },
        env: EnvironmentDeclaration { resources, excludes: args.excludes },
        transport_kind: args.transport,
        executor_endpoint: args.executor,
        snapshot_policy: args.policy,
    };

    let id = match service.delegate(request).await {
        Ok(id) => id,
        Err(e) => {
            out.protocol_error(&e);
            return Ok(ExitCode::FAILURE);
        }
    };
    out.line(format!("delegation {id}"), json!({ "delegationId": id }));

    let record = service.record(&id).await.expect("record just created");
    if record.is_terminal() {
        drain_progress(out, args.watch, &mut progress);
        return Ok(finish(out, &record));
    }
    if let Err(e) = service.start(&id).await {
        drain_progress(out, args.watch, &mut progress);
        out.protocol_error(&e);
        let record = service.record(&id).await.expect("record exists");
        return Ok(finish(out, &record));
    }

    loop {
        drain_progress(out, args.watch, &mut progress);
        let record = service.record(&id).await.expect("record exists");
        if record.is_terminal() {
            drain_progress(out, args.watch, &mut progress);
            return Ok(finish(out, &record));
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
    }
}

fn load_record(state_dir: &Path, delegation_id: &str) -> Result<DelegationRecord> {
    for (path, result) in awcp_sdk::persist::load_records(state_dir) {
        match result {
            Ok(record) if record.delegation_id == delegation_id => return Ok(record),
            Ok(_) => {}
            Err(e) => {
                tracing::warn!(file = %path.display(), error = %e.message, "unreadable record");
            }
        }
    }
    bail!("no delegation {delegation_id} under {}", state_dir.display());
}

fn ts(at: chrono::DateTime<chrono::Utc>) -> String {
    at.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Print one delegation in full, or a one-line summary of each.
pub async fn status(
    out: &Out,
    state_dir: &Path,
    delegation_id: Option<String>,
) -> Result<ExitCode> {
    match delegation_id {
        Some(id) => {
            let record = load_record(state_dir, &id)?;
            if out.json {
                println!("{}", serde_json::to_string_pretty(&record)?);
                return Ok(ExitCode::SUCCESS);
            }
            println!("delegation {}", record.delegation_id);
            println!("  state:     {}", record.state.as_str());
            println!("  task:      {}", record.task.description);
            println!("  executor:  {}", record.executor_endpoint);
            println!("  transport: {}", record.transport_kind.as_str());
            if let Some(lease) = &record.active_lease {
                println!("  lease:     {} until {}", lease.mode.as_str(), ts(lease.expires_at));
            } else if let Some(lease) = &record.effective_lease {
                println!("  lease:     {} for {}s (not started)", lease.mode.as_str(), lease.ttl_seconds);
            }
            if !record.pending_snapshots.is_empty() {
                let ids: Vec<&str> =
                    record.pending_snapshots.iter().map(|d| d.snapshot_id.as_str()).collect();
                println!("  staged:    {}", ids.join(", "));
            }
            if !record.applied_snapshot_ids.is_empty() {
                println!("  applied:   {}", record.applied_snapshot_ids.join(", "));
            }
            if let Some(done) = &record.final_summary {
                println!("  summary:   {}", done.final_summary);
            }
            if let Some(e) = &record.last_error {
                println!("  error:     {} {}", e.code.as_str(), e.message);
            }
            println!("  history:");
            for t in &record.history {
                println!(
                    "    {}  {} --{}--> {}",
                    ts(t.at),
                    t.from.as_str(),
                    t.event.as_str(),
                    t.to.as_str()
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        None => {
            let mut records: Vec<DelegationRecord> = awcp_sdk::persist::load_records(state_dir)
                .into_iter()
                .filter_map(|(_, r)| r.ok())
                .collect();
            records.sort_by(|a, b| a.created_at.cmp(&b.created_at));
            if out.json {
                println!("{}", serde_json::to_string_pretty(&records)?);
                return Ok(ExitCode::SUCCESS);
            }
            if records.is_empty() {
                println!("no delegations under {}", state_dir.display());
            }
            for r in records {
                println!(
                    "{}  {:9}  {}  {}",
                    r.delegation_id,
                    r.state.as_str(),
                    ts(r.created_at),
                    r.task.description
                );
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// Review staged snapshots: list is read-only; approve and discard mutate
/// the record (and, for approve, the workspace).
pub async fn snapshots(
    out: &Out,
    config: &CliConfig,
    state_dir: &Path,
    action: SnapshotsAction,
) -> Result<ExitCode> {
    match action {
        SnapshotsAction::List { delegation_id } => {
            let record = load_record(state_dir, &delegation_id)?;
            if out.json {
                println!("{}", serde_json::to_string_pretty(&record.pending_snapshots)?);
                return Ok(ExitCode::SUCCESS);
            }
            if record.pending_snapshots.is_empty() {
                println!("no staged snapshots");
            }
            for d in &record.pending_snapshots {
                let tag = if d.recommended { " (recommended)" } else { "" };
                println!("{}  captured {}{}", d.snapshot_id, ts(d.captured_at), tag);
            }
            Ok(ExitCode::SUCCESS)
        }
        SnapshotsAction::Approve { delegation_id, snapshot_id } => {
            let Some(_lock) = acquire_lock(out, state_dir)? else {
                return Ok(ExitCode::from(EXIT_BUSY));
            };
            let service =
                delegator_service(config, state_dir, AdmissionPolicy::permissive("/"));
            service.recover_all().await;
            match service.approve_snapshot(&delegation_id, &snapshot_id).await {
                Ok(summary) => {
                    out.line(
                        format!(
                            "snapshot {snapshot_id} applied: {} added, {} modified, {} deleted",
                            summary.added.len(),
                            summary.modified.len(),
                            summary.deleted.len()
                        ),
                        json!({ "snapshotApplied": snapshot_id, "summary": summary }),
                    );
                    Ok(ExitCode::SUCCESS)
                }
                Err(e) => {
                    out.protocol_error(&e);
                    Ok(ExitCode::FAILURE)
                }
            }
        }
        SnapshotsAction::Discard { delegation_id, snapshot_id } => {
            let Some(_lock) = acquire_lock(out, state_dir)? else {
                return Ok(ExitCode::from(EXIT_BUSY));
            };
            let service =
                delegator_service(config, state_dir, AdmissionPolicy::permissive("/"));
            service.recover_all().await;
            match service.discard_snapshot(&delegation_id, &snapshot_id).await {
                Ok(()) => {
                    out.line(
                        format!("snapshot {snapshot_id} discarded"),
                        json!({ "snapshotDiscarded": snapshot_id }),
                    );
                    Ok(ExitCode::SUCCESS)
                }
                Err(e) => {
                    out.protocol_error(&e);
                    Ok(ExitCode::FAILURE)
                }
            }
        }
    }
}

/// Drive CANCEL into a live delegation.
pub async fn cancel(
    out: &Out,
    config: &CliConfig,
    state_dir: &Path,
    delegation_id: &str,
) -> Result<ExitCode> {
    let Some(_lock) = acquire_lock(out, state_dir)? else {
        return Ok(ExitCode::from(EXIT_BUSY));
    };
    let service = delegator_service(config, state_dir, AdmissionPolicy::permissive("/"));
    service.recover_all().await;
    match service.cancel(delegation_id).await {
        Ok(true) => {
            out.line(
                format!("delegation {delegation_id} cancelled"),
                json!({ "cancelled": delegation_id }),
            );
            Ok(ExitCode::SUCCESS)
        }
        Ok(false) => {
            let state = service
                .record(delegation_id)
                .await
                .map(|r| r.state.as_str())
                .unwrap_or("unknown");
            out.line(
                format!("delegation {delegation_id} is already terminal ({state})"),
                json!({ "alreadyTerminal": delegation_id, "state": state }),
            );
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            out.protocol_error(&e);
            Ok(ExitCode::FAILURE)
        }
    }
}

/// Reload persisted delegations, resume any that were mid-flight, and wait
/// for the resumed ones to settle.
pub async fn recover(out: &Out, config: &CliConfig, state_dir: &Path) -> Result<ExitCode> {
    let Some(_lock) = acquire_lock(out, state_dir)? else {
        return Ok(ExitCode::from(EXIT_BUSY));
    };
    let service = delegator_service(config, state_dir, AdmissionPolicy::permissive("/"));
    let outcomes = service.recover_all().await;
    let mut corrupt = false;
    let mut resumed = Vec::new();
    for o in &outcomes {
        let id = o.delegation_id.clone().unwrap_or_else(|| "?".into());
        match &o.error {
            Some(e) => {
                corrupt = true;
                out.line(
                    format!("{id}: unreadable ({})", e.message),
                    json!({ "delegationId": id, "error": e }),
                );
            }
            None => {
                let state =
                    o.state.map(|s| s.as_str().to_string()).unwrap_or_else(|| "?".into());
                out.line(
                    format!("{id}: {state}{}", if o.resumed { ", resumed" } else { "" }),
                    json!({ "delegationId": id, "state": state, "resumed": o.resumed }),
                );
                if o.resumed {
                    resumed.push(id);
                }
            }
        }
    }

    let mut all_completed = true;
    for id in &resumed {
        loop {
            let record = service.record(id).await.expect("recovered record");
            if record.is_terminal() {
                all_completed &= record.state == DelegationState::Completed;
                let _ = finish(out, &record);
                break;
            }
            tokio::time::sleep(Duration::from_millis(100)).await;
        }
    }
    if corrupt {
        return Ok(ExitCode::FAILURE);
    }
    if !all_completed {
        return Ok(ExitCode::from(EXIT_NOT_COMPLETED));
    }
    Ok(ExitCode::SUCCESS)
}

/// Run the embedded pre-signed-URL blob store that backs the storage
/// transport.
pub async fn blobstore(out: &Out, args: BlobstoreArgs) -> Result<ExitCode> {
    let token = args
        .admin_token
        .unwrap_or_else(|| uuid::Uuid::new_v4().simple().to_string());
    let store = BlobStore::new(token.clone());
    let listener = tokio::net::TcpListener::bind(args.listen.as_str())
        .await
        .with_context(|| format!("bind {}", args.listen))?;
    let addr = listener.local_addr()?;
    out.line(
        format!("blob store at http://{addr} (admin token {token})"),
        json!({ "url": format!("http://{addr}"), "adminToken": token }),
    );
    let server = tokio::spawn(async move {
        let _ = axum::serve(listener, store.router()).await;
    });
    wait_for_signal().await;
    server.abort();
    Ok(ExitCode::SUCCESS)
}
