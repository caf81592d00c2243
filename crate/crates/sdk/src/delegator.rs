//! Delegator-side service: projects a workspace to an executor, follows the
//! assignment's event stream, reconciles snapshots back into the workspace
//! under the configured policy, and keeps every delegation's record on disk
//! so a restarted process can pick up where it left off.

use crate::admission::AdmissionPolicy;
use crate::client::{StartReply, WireClient};
use crate::persist::{load_records, persist_record, record_path};
use crate::record::{DelegationRecord, SnapshotPolicy};
use awcp_core::{
    activate_lease, capabilities_for, is_expired, negotiate_lease, DelegationEvent,
    DelegationState, DelegationStateMachine, DonePayload, EnvironmentDeclaration, ErrorCode,
    InvitePayload, LeaseConfig, LeaseMode, Message, Payload, ProtocolError, SnapshotDescriptor,
    StartPayload, TaskSpec, TransportKind,
};
use awcp_transport::{
    apply_tree, delegator_transport, ChangeSummary, DelegatorTransport, DelegatorTransportConfig,
    PatternSet,
};
use chrono::Utc;
use futures::StreamExt;
use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex as StdMutex};
use std::time::Duration;
use tokio::sync::{broadcast, Mutex as AsyncMutex};
use tokio::task::JoinHandle;

pub struct DelegatorConfig {
    /// Where delegation records live; one JSON file per delegation.
    pub state_dir: PathBuf,
    pub admission: AdmissionPolicy,
    pub transport: DelegatorTransportConfig,
    /// How long an INVITE may sit unanswered (or unaccepted work may sit
    /// unstarted) before the delegation expires.
    pub invitation_deadline: Duration,
    pub expiry_scan_interval: Duration,
    /// Bearer token presented to executors.
    pub auth_token: Option<String>,
}

impl DelegatorConfig {
    pub fn new(state_dir: impl Into<PathBuf>, admission: AdmissionPolicy) -> Self {
        DelegatorConfig {
            state_dir: state_dir.into(),
            admission,
            transport: DelegatorTransportConfig::default(),
            invitation_deadline: Duration::from_secs(120),
            expiry_scan_interval: Duration::from_secs(1),
            auth_token: None,
        }
    }
}

/// Everything needed to launch one delegation.
#[derive(Debug, Clone)]
pub struct DelegateRequest {
    pub workspace_root: PathBuf,
    pub task: TaskSpec,
    pub lease: LeaseConfig,
    pub env: EnvironmentDeclaration,
    pub transport_kind: TransportKind,
    pub executor_endpoint: String,
    pub snapshot_policy: SnapshotPolicy,
}

/// Live observations for watchers (CLI `--watch`, the test harness).
#[derive(Debug, Clone)]
pub struct Progress {
    pub delegation_id: String,
    pub kind: ProgressKind,
}

#[derive(Debug, Clone)]
pub enum ProgressKind {
    StateChanged {
        from: DelegationState,
        event: DelegationEvent,
        to: DelegationState,
    },
    /// A line of backend output relayed over the event stream.
    BackendNote { detail: String },
    SnapshotApplied { snapshot_id: String, changed: usize },
    SnapshotQueued { snapshot_id: String },
    SnapshotDiscarded { snapshot_id: String },
    AckSent,
}

/// What recovery found for one on-disk record.
#[derive(Debug)]
pub struct RecoverOutcome {
    pub path: PathBuf,
    pub delegation_id: Option<String>,
    pub state: Option<DelegationState>,
    /// True when the event stream was re-subscribed.
    pub resumed: bool,
    pub error: Option<ProtocolError>,
}

struct DelegationEntry {
    record: DelegationRecord,
    machine: DelegationStateMachine,
    transport: Option<Box<dyn DelegatorTransport>>,
    pump: Option<JoinHandle<()>>,
}

type Entry = Arc<AsyncMutex<DelegationEntry>>;

pub struct DelegatorService {
    config: DelegatorConfig,
    wire: WireClient,
    entries: StdMutex<HashMap<String, Entry>>,
    progress: broadcast::Sender<Progress>,
    scan: StdMutex<Option<JoinHandle<()>>>,
}

impl DelegatorService {
    pub fn new(config: DelegatorConfig) -> Arc<Self> {
        let wire = WireClient::new(config.auth_token.clone());
        let (progress, _) = broadcast::channel(1024);
        let service = Arc::new(DelegatorService {
            config,
            wire,
            entries: StdMutex::new(HashMap::new()),
            progress,
            scan: StdMutex::new(None),
        });
        service.arm_expiry_scan();
        service
    }

    pub fn subscribe_progress(&self) -> broadcast::Receiver<Progress> {
        self.progress.subscribe()
    }

    pub fn state_dir(&self) -> &std::path::Path {
        &self.config.state_dir
    }

    fn entry(&self, delegation_id: &str) -> Option<Entry> {
        self.entries.lock().expect("entry map").get(delegation_id).cloned()
    }

    /// Snapshot of one delegation's persistent record.
    pub async fn record(&self, delegation_id: &str) -> Option<DelegationRecord> {
        let entry = self.entry(delegation_id)?;
        let ent = entry.lock().await;
        Some(ent.record.clone())
    }

    /// Records of every delegation this service knows, oldest first.
    pub async fn list(&self) -> Vec<DelegationRecord> {
        let entries: Vec<Entry> =
            self.entries.lock().expect("entry map").values().cloned().collect();
        let mut records = Vec::with_capacity(entries.len());
        for entry in entries {
            records.push(entry.lock().await.record.clone());
        }
        records.sort_by(|a, b| a.created_at.cmp(&b.created_at));
        records
    }

    fn emit(&self, delegation_id: &str, kind: ProgressKind) {
        let _ = self
            .progress
            .send(Progress { delegation_id: delegation_id.to_string(), kind });
    }

    /// Apply a lifecycle event, mirror it into the record, and notify
    /// watchers. The caller persists.
    fn apply(
        &self,
        ent: &mut DelegationEntry,
        event: DelegationEvent,
    ) -> Result<DelegationState, ProtocolError> {
        let from = ent.machine.state();
        let to = ent.machine.apply(event, Utc::now())?;
        ent.record.state = to;
        ent.record.history = ent.machine.history().to_vec();
        self.emit(&ent.record.delegation_id, ProgressKind::StateChanged { from, event, to });
        Ok(to)
    }

    fn persist(&self, record: &DelegationRecord) {
        if let Err(e) = persist_record(&self.config.state_dir, record) {
            tracing::error!(
                delegation = %record.delegation_id,
                error = %e.message,
                "failed to persist delegation record"
            );
        }
    }

    fn ensure_transport<'a>(
        &self,
        ent: &'a mut DelegationEntry,
    ) -> Result<&'a mut Box<dyn DelegatorTransport>, ProtocolError> {
        if ent.transport.is_none() {
            let transport = delegator_transport(
                ent.record.transport_kind,
                &ent.record.delegation_id,
                &self.config.transport,
            )
            .map_err(ProtocolError::from)?;
            ent.transport = Some(transport);
        }
        Ok(ent.transport.as_mut().expect("just ensured"))
    }

    /// Detach and release the transport session. Deferred while staged
    /// snapshots are pending: their bytes live in transport-parked resources
    /// (blob prefixes, remote branches), so releasing now would destroy them
    /// before review. Approve and discard call back in once the queue
    /// drains.
    async fn teardown_transport(ent: &mut DelegationEntry) {
        if !ent.record.pending_snapshots.is_empty() {
            return;
        }
        if let Some(mut transport) = ent.transport.take() {
            let _ = transport.detach().await;
            let _ = transport.release().await;
        }
    }

    /// Create a delegation and send INVITE. Once the record exists the id
    /// is returned even when the invitation fails; the failure is recorded
    /// in the delegation's state and `last_error`. An error return means no
    /// delegation was created at all.
    pub async fn delegate(self: &Arc<Self>, req: DelegateRequest) -> Result<String, ProtocolError> {
        if req.lease.ttl_seconds == 0 {
            return Err(ProtocolError::new(
                ErrorCode::MalformedMessage,
                "lease ttlSeconds must be at least 1",
            ));
        }
        if req.env.resources.is_empty() {
            return Err(ProtocolError::new(
                ErrorCode::MalformedMessage,
                "environment must declare at least one resource pattern",
            ));
        }
        // Admission gates the projection before anything leaves this host.
        self.config.admission.admit(&req.workspace_root, &req.env)?;

        let id = uuid::Uuid::new_v4().to_string();
        let record = DelegationRecord::new(
            id.clone(),
            req.task.clone(),
            req.lease,
            req.env.clone(),
            req.workspace_root.clone(),
            req.transport_kind,
            req.executor_endpoint.clone(),
            req.snapshot_policy,
        );
        let entry: Entry = Arc::new(AsyncMutex::new(DelegationEntry {
            record,
            machine: DelegationStateMachine::new(),
            transport: None,
            pump: None,
        }));
        self.entries.lock().expect("entry map").insert(id.clone(), entry.clone());

        let mut ent = entry.lock().await;
        self.apply(&mut ent, DelegationEvent::SendInvite)?;
        ent.record.invited_at = Some(Utc::now());
        self.persist(&ent.record);

        let invite = Message::new(
            &id,
            Payload::Invite(InvitePayload {
                task: req.task,
                lease: req.lease,
                environment: req.env,
                transport_kind: req.transport_kind,
            }),
        );
        match self.wire.post_invite(&req.executor_endpoint, &invite).await {
            Ok(reply) => match reply.payload {
                Payload::Accept(accept) => {
                    match negotiate_lease(&req.lease, &accept.constraints) {
                        Ok(effective) => {
                            self.apply(&mut ent, DelegationEvent::RecvAccept)?;
                            ent.record.effective_lease = Some(effective);
                            ent.record.executor_work_dir = Some(accept.work_dir);
                            self.persist(&ent.record);
                        }
                        Err(e) => {
                            // The executor accepted terms it cannot satisfy;
                            // treat it as a refusal and let it reclaim the
                            // prepared directory on its own timeout.
                            let _ = self.apply(&mut ent, DelegationEvent::Error);
                            ent.record.last_error = Some(e);
                            self.persist(&ent.record);
                        }
                    }
                }
                Payload::Error(e) => {
                    let _ = self.apply(&mut ent, DelegationEvent::Error);
                    ent.record.last_error = Some(e);
                    self.persist(&ent.record);
                }
                other => {
                    let _ = self.apply(&mut ent, DelegationEvent::Error);
                    ent.record.last_error = Some(ProtocolError::new(
                        ErrorCode::MalformedMessage,
                        format!("INVITE was answered with {:?}", Message::new(&id, other).message_type()),
                    ));
                    self.persist(&ent.record);
                }
            },
            Err(e) => {
                let _ = self.apply(&mut ent, DelegationEvent::Error);
                ent.record.last_error = Some(ProtocolError::new(
                    ErrorCode::TransportUnavailable,
                    format!("INVITE could not be delivered: {e}"),
                ));
                self.persist(&ent.record);
            }
        }
        Ok(id)
    }

    /// Package the workspace, activate the lease, send START, and begin
    /// following the event stream.
    pub async fn start(self: &Arc<Self>, delegation_id: &str) -> Result<(), ProtocolError> {
        let entry = self.entry(delegation_id).ok_or_else(|| {
            ProtocolError::new(
                ErrorCode::UnknownDelegation,
                format!("no delegation {delegation_id}"),
            )
        })?;
        let mut ent = entry.lock().await;
        if ent.machine.state() != DelegationState::Accepted {
            return Err(ProtocolError::new(
                ErrorCode::InvalidTransition,
                format!("START is not legal in state {}", ent.machine.state()),
            ));
        }

        // Re-admit: the workspace may have changed since the invitation.
        let manifest =
            self.config.admission.admit(&ent.record.workspace_root, &ent.record.env)?;

        let fail = |service: &Self, ent: &mut DelegationEntry, e: ProtocolError| {
            let _ = service.apply(ent, DelegationEvent::Error);
            ent.record.last_error = Some(e.clone());
            service.persist(&ent.record);
            e
        };

        let workspace_root = ent.record.workspace_root.clone();
        let transport = match self.ensure_transport(&mut ent) {
            Ok(t) => t,
            Err(e) => return Err(fail(self, &mut ent, e)),
        };
        let handle = match transport.package(&workspace_root, &manifest).await {
            Ok(h) => h,
            Err(e) => {
                Self::teardown_transport(&mut ent).await;
                return Err(fail(self, &mut ent, e.into()));
            }
        };

        let effective = ent.record.effective_lease.expect("effective lease set at accept");
        let active = activate_lease(&effective, Utc::now());
        let start = Message::new(
            delegation_id,
            Payload::Start(StartPayload { lease: active, transport: handle.clone() }),
        );
        match self.wire.post_start(&ent.record.executor_endpoint, &start).await {
            Ok(StartReply::Accepted) => {
                self.apply(&mut ent, DelegationEvent::SendStart)?;
                ent.record.active_lease = Some(active);
                ent.record.transport_handle = Some(handle);
                ent.record.live_sync = capabilities_for(ent.record.transport_kind).live_sync;
                self.persist(&ent.record);
                self.arm_pump(delegation_id, &entry, &mut ent);
                Ok(())
            }
            Ok(StartReply::Refused(e)) => {
                Self::teardown_transport(&mut ent).await;
                Err(fail(self, &mut ent, e))
            }
            Err(e) => {
                Self::teardown_transport(&mut ent).await;
                let err = ProtocolError::new(
                    ErrorCode::TransportUnavailable,
                    format!("START could not be delivered: {e}"),
                );
                Err(fail(self, &mut ent, err))
            }
        }
    }

    fn arm_pump(self: &Arc<Self>, delegation_id: &str, entry: &Entry, ent: &mut DelegationEntry) {
        let service = self.clone();
        let id = delegation_id.to_string();
        let pump_entry = entry.clone();
        let endpoint = ent.record.executor_endpoint.clone();
        let cursor = ent.record.last_event_id;
        ent.pump = Some(tokio::spawn(async move {
            service.pump(id, pump_entry, endpoint, cursor).await;
        }));
    }

    /// Follow the executor's event stream until a terminal state. The
    /// subscription layer handles reconnection; an exhausted stream without
    /// a terminal event is a transport failure.
    async fn pump(self: Arc<Self>, delegation_id: String, entry: Entry, endpoint: String, cursor: u64) {
        let mut stream = self.wire.subscribe(&endpoint, &delegation_id, cursor);
        loop {
            match stream.next().await {
                Some(Ok(frame)) => {
                    if self.handle_frame(&delegation_id, &entry, frame).await {
                        return;
                    }
                }
                Some(Err(e)) => {
                    tracing::warn!(delegation = %delegation_id, error = %e, "event stream lost");
                    let mut ent = entry.lock().await;
                    if !ent.record.is_terminal() {
                        let _ = self.apply(&mut ent, DelegationEvent::Error);
                        ent.record.last_error = Some(ProtocolError::new(
                            ErrorCode::TransportUnavailable,
                            format!("event stream lost: {e}"),
                        ));
                        Self::teardown_transport(&mut ent).await;
                        self.persist(&ent.record);
                    }
                    return;
                }
                None => {
                    // Stream ended cleanly without a terminal event: the
                    // executor closed the channel after we had already
                    // recorded the terminal state, or dropped us.
                    let mut ent = entry.lock().await;
                    if !ent.record.is_terminal() {
                        let _ = self.apply(&mut ent, DelegationEvent::Error);
                        ent.record.last_error = Some(ProtocolError::new(
                            ErrorCode::TransportUnavailable,
                            "event stream ended before a terminal event",
                        ));
                        Self::teardown_transport(&mut ent).await;
                        self.persist(&ent.record);
                    }
                    return;
                }
            }
        }
    }

    /// React to one event frame. Returns true once the delegation is
    /// terminal.
    async fn handle_frame(
        self: &Arc<Self>,
        delegation_id: &str,
        entry: &Entry,
        frame: crate::sse::SseFrame,
    ) -> bool {
        let mut ent = entry.lock().await;
        if ent.record.is_terminal() {
            return true;
        }
        ent.record.last_event_id = frame.id;

        match frame.event.as_str() {
            "status" => {
                if ent.machine.state() == DelegationState::Started {
                    let _ = self.apply(&mut ent, DelegationEvent::SetupComplete);
                }
                if let Ok(v) = serde_json::from_str::<serde_json::Value>(&frame.data) {
                    if let Some(detail) = v.get("detail").and_then(|d| d.as_str()) {
                        self.emit(
                            delegation_id,
                            ProgressKind::BackendNote { detail: detail.to_string() },
                        );
                    }
                }
                self.persist(&ent.record);
            }
            "snapshot" => {
                if self.handle_snapshot_frame(delegation_id, &mut ent, &frame.data).await {
                    return true;
                }
            }
            "done" => {
                if ent.machine.state() == DelegationState::Started {
                    let _ = self.apply(&mut ent, DelegationEvent::SetupComplete);
                }
                let done: DonePayload = serde_json::from_str(&frame.data).unwrap_or(DonePayload {
                    final_summary: frame.data.clone(),
                    highlights: Vec::new(),
                });
                if self.apply(&mut ent, DelegationEvent::RecvDone).is_err() {
                    // DONE arrived in a state that cannot complete; record
                    // the protocol violation.
                    let _ = self.apply(&mut ent, DelegationEvent::Error);
                    ent.record.last_error = Some(ProtocolError::new(
                        ErrorCode::InvalidTransition,
                        "DONE arrived before the assignment was running",
                    ));
                    Self::teardown_transport(&mut ent).await;
                    self.persist(&ent.record);
                    return true;
                }
                ent.record.final_summary = Some(done);
                // Persist before acknowledging: a crash right here means
                // the ACK is never repeated, and the executor reclaims on
                // its own timeout.
                self.persist(&ent.record);
                if self
                    .wire
                    .post_ack(&ent.record.executor_endpoint, delegation_id)
                    .await
                    .is_ok()
                {
                    self.emit(delegation_id, ProgressKind::AckSent);
                } else {
                    tracing::warn!(delegation = %delegation_id, "ACK delivery failed");
                }
                Self::teardown_transport(&mut ent).await;
                return true;
            }
            "error" => {
                let err: ProtocolError = serde_json::from_str(&frame.data).unwrap_or_else(|_| {
                    ProtocolError::new(ErrorCode::Internal, frame.data.clone())
                });
                let event = if err.code == ErrorCode::LeaseExpired
                    && ent.machine.can_apply(DelegationEvent::Expire)
                {
                    DelegationEvent::Expire
                } else {
                    DelegationEvent::Error
                };
                let _ = self.apply(&mut ent, event);
                ent.record.last_error = Some(err);
                Self::teardown_transport(&mut ent).await;
                self.persist(&ent.record);
                return true;
            }
            other => {
                tracing::debug!(delegation = %delegation_id, event = other, "ignoring unknown event");
                self.persist(&ent.record);
            }
        }
        false
    }

    /// Returns true when the snapshot killed the delegation (integrity
    /// failure under the auto policy).
    async fn handle_snapshot_frame(
        self: &Arc<Self>,
        delegation_id: &str,
        ent: &mut DelegationEntry,
        data: &str,
    ) -> bool {
        // Oversized descriptors arrive by reference and are fetched back.
        let full = match serde_json::from_str::<serde_json::Value>(data) {
            Ok(v) if v.get("byReference").and_then(|b| b.as_bool()) == Some(true) => {
                let sid = v
                    .get("snapshotId")
                    .and_then(|s| s.as_str())
                    .unwrap_or_default()
                    .to_string();
                match self
                    .wire
                    .fetch_snapshot(&ent.record.executor_endpoint, delegation_id, &sid)
                    .await
                {
                    Ok(body) => body,
                    Err(e) => {
                        tracing::warn!(delegation = %delegation_id, error = %e, "snapshot fetch failed");
                        self.persist(&ent.record);
                        return false;
                    }
                }
            }
            _ => data.to_string(),
        };
        let descriptor: SnapshotDescriptor = match serde_json::from_str(&full) {
            Ok(d) => d,
            Err(e) => {
                tracing::warn!(delegation = %delegation_id, error = %e, "snapshot descriptor unreadable");
                self.persist(&ent.record);
                return false;
            }
        };

        if ent.machine.state() == DelegationState::Started {
            let _ = self.apply(ent, DelegationEvent::SetupComplete);
        }
        if self.apply(ent, DelegationEvent::SnapshotReceived).is_err() {
            self.persist(&ent.record);
            return false;
        }

        let sid = descriptor.snapshot_id.clone();
        // Replays after reconnect or recovery must not touch disk twice.
        if ent.record.applied_snapshot_ids.contains(&sid)
            || ent.record.pending_snapshots.iter().any(|d| d.snapshot_id == sid)
        {
            self.persist(&ent.record);
            return false;
        }

        let policy = if ent.record.live_sync {
            // Live transports already synchronized; nothing to pull.
            SnapshotPolicy::Discard
        } else if ent.record.active_lease.map(|l| l.mode) == Some(LeaseMode::ReadOnly) {
            // Read-only executors cannot have changed anything worth
            // pulling back.
            SnapshotPolicy::Discard
        } else {
            ent.record.snapshot_policy
        };

        match policy {
            SnapshotPolicy::Auto => match self.apply_snapshot_locked(ent, &descriptor).await {
                Ok(summary) => {
                    self.emit(
                        delegation_id,
                        ProgressKind::SnapshotApplied { snapshot_id: sid, changed: summary.total() },
                    );
                    self.persist(&ent.record);
                    false
                }
                Err(e) if e.code == ErrorCode::IntegrityMismatch => {
                    // A tampered or torn snapshot poisons the delegation.
                    let _ = self.apply(ent, DelegationEvent::Error);
                    ent.record.last_error = Some(e.clone());
                    self.persist(&ent.record);
                    let msg = Message::new(delegation_id, Payload::Error(e));
                    let _ =
                        self.wire.post_error(&ent.record.executor_endpoint, &msg).await;
                    Self::teardown_transport(ent).await;
                    true
                }
                Err(e) => {
                    tracing::warn!(delegation = %delegation_id, error = %e.message, "snapshot apply failed");
                    self.persist(&ent.record);
                    false
                }
            },
            SnapshotPolicy::Staged => {
                ent.record.pending_snapshots.push(descriptor);
                self.emit(delegation_id, ProgressKind::SnapshotQueued { snapshot_id: sid });
                self.persist(&ent.record);
                false
            }
            SnapshotPolicy::Discard => {
                self.emit(delegation_id, ProgressKind::SnapshotDiscarded { snapshot_id: sid });
                self.persist(&ent.record);
                false
            }
        }
    }

    async fn apply_snapshot_locked(
        &self,
        ent: &mut DelegationEntry,
        descriptor: &SnapshotDescriptor,
    ) -> Result<ChangeSummary, ProtocolError> {
        let workspace_root = ent.record.workspace_root.clone();
        let env = ent.record.env.clone();
        let snapshot_id = descriptor.snapshot_id.clone();
        let transport = self.ensure_transport(ent)?;
        let resolved = transport.resolve_snapshot(descriptor).await.map_err(ProtocolError::from)?;
        let patterns = PatternSet::compile(&env).map_err(ProtocolError::from)?;
        let summary =
            apply_tree(&workspace_root, resolved.root(), &patterns).map_err(ProtocolError::from)?;
        ent.record.applied_snapshot_ids.push(snapshot_id);
        Ok(summary)
    }

    /// Apply one staged snapshot. Legal in any state, including after
    /// completion; that is the point of the staged policy.
    pub async fn approve_snapshot(
        &self,
        delegation_id: &str,
        snapshot_id: &str,
    ) -> Result<ChangeSummary, ProtocolError> {
        let entry = self.entry(delegation_id).ok_or_else(|| {
            ProtocolError::new(
                ErrorCode::UnknownDelegation,
                format!("no delegation {delegation_id}"),
            )
        })?;
        let mut ent = entry.lock().await;
        let Some(pos) =
            ent.record.pending_snapshots.iter().position(|d| d.snapshot_id == snapshot_id)
        else {
            return Err(ProtocolError::new(
                ErrorCode::InvalidState,
                format!("no staged snapshot {snapshot_id} for delegation {delegation_id}"),
            ));
        };
        let descriptor = ent.record.pending_snapshots[pos].clone();
        let summary = self.apply_snapshot_locked(&mut ent, &descriptor).await?;
        ent.record.pending_snapshots.remove(pos);
        if ent.record.is_terminal() && ent.record.pending_snapshots.is_empty() {
            // Last review done; the deferred teardown can reclaim parked
            // transport resources now.
            Self::teardown_transport(&mut ent).await;
        }
        self.persist(&ent.record);
        self.emit(
            delegation_id,
            ProgressKind::SnapshotApplied {
                snapshot_id: snapshot_id.to_string(),
                changed: summary.total(),
            },
        );
        Ok(summary)
    }

    /// Drop one staged snapshot without applying it.
    pub async fn discard_snapshot(
        &self,
        delegation_id: &str,
        snapshot_id: &str,
    ) -> Result<(), ProtocolError> {
        let entry = self.entry(delegation_id).ok_or_else(|| {
            ProtocolError::new(
                ErrorCode::UnknownDelegation,
                format!("no delegation {delegation_id}"),
            )
        })?;
        let mut ent = entry.lock().await;
        let before = ent.record.pending_snapshots.len();
        ent.record.pending_snapshots.retain(|d| d.snapshot_id != snapshot_id);
        if ent.record.pending_snapshots.len() == before {
            return Err(ProtocolError::new(
                ErrorCode::InvalidState,
                format!("no staged snapshot {snapshot_id} for delegation {delegation_id}"),
            ));
        }
        if ent.record.is_terminal() && ent.record.pending_snapshots.is_empty() {
            Self::teardown_transport(&mut ent).await;
        }
        self.persist(&ent.record);
        self.emit(
            delegation_id,
            ProgressKind::SnapshotDiscarded { snapshot_id: snapshot_id.to_string() },
        );
        Ok(())
    }

    /// Cancel a delegation. `Ok(true)` when this call terminated it,
    /// `Ok(false)` when it was already terminal.
    pub async fn cancel(self: &Arc<Self>, delegation_id: &str) -> Result<bool, ProtocolError> {
        let entry = self.entry(delegation_id).ok_or_else(|| {
            ProtocolError::new(
                ErrorCode::UnknownDelegation,
                format!("no delegation {delegation_id}"),
            )
        })?;
        let mut ent = entry.lock().await;
        if ent.record.is_terminal() {
            return Ok(false);
        }
        if let Some(pump) = ent.pump.take() {
            pump.abort();
        }
        self.apply(&mut ent, DelegationEvent::Cancel)?;
        // Tell the executor when it might be holding an assignment.
        if ent.record.executor_work_dir.is_some() {
            let err = ProtocolError::new(ErrorCode::Cancelled, "delegator cancelled the task");
            let msg = Message::new(delegation_id, Payload::Error(err));
            let _ = self.wire.post_error(&ent.record.executor_endpoint, &msg).await;
        }
        // Cancellation abandons the review queue along with the task.
        for d in std::mem::take(&mut ent.record.pending_snapshots) {
            self.emit(
                delegation_id,
                ProgressKind::SnapshotDiscarded { snapshot_id: d.snapshot_id },
            );
        }
        Self::teardown_transport(&mut ent).await;
        self.persist(&ent.record);
        Ok(true)
    }

    fn arm_expiry_scan(self: &Arc<Self>) {
        let service = self.clone();
        let interval = self.config.expiry_scan_interval;
        let handle = tokio::spawn(async move {
            let mut tick = tokio::time::interval(interval);
            tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                tick.tick().await;
                service.expiry_scan_once().await;
            }
        });
        *self.scan.lock().expect("scan slot") = Some(handle);
    }

    async fn expiry_scan_once(self: &Arc<Self>) {
        let entries: Vec<Entry> =
            self.entries.lock().expect("entry map").values().cloned().collect();
        let now = Utc::now();
        for entry in entries {
            let mut ent = entry.lock().await;
            match ent.machine.state() {
                DelegationState::Invited | DelegationState::Accepted => {
                    let stale = ent
                        .record
                        .invited_at
                        .map(|t| {
                            now.signed_duration_since(t).to_std().unwrap_or_default()
                                > self.config.invitation_deadline
                        })
                        .unwrap_or(false);
                    if stale {
                        let _ = self.apply(&mut ent, DelegationEvent::Expire);
                        ent.record.last_error = Some(ProtocolError::new(
                            ErrorCode::LeaseExpired,
                            "invitation deadline passed without a start",
                        ));
                        self.persist(&ent.record);
                    }
                }
                DelegationState::Running => {
                    if ent.record.active_lease.map(|l| is_expired(&l, now)).unwrap_or(false) {
                        if let Some(pump) = ent.pump.take() {
                            pump.abort();
                        }
                        let _ = self.apply(&mut ent, DelegationEvent::Expire);
                        ent.record.last_error = Some(ProtocolError::new(
                            ErrorCode::LeaseExpired,
                            "lease expired before completion",
                        ));
                        Self::teardown_transport(&mut ent).await;
                        self.persist(&ent.record);
                    }
                }
                DelegationState::Started => {
                    // EXPIRE is not a legal event here; a setup that outlives
                    // the lease plus grace is an error.
                    let overdue = ent
                        .record
                        .active_lease
                        .map(|l| now > l.expires_at + chrono::Duration::seconds(5))
                        .unwrap_or(false);
                    if overdue {
                        if let Some(pump) = ent.pump.take() {
                            pump.abort();
                        }
                        let _ = self.apply(&mut ent, DelegationEvent::Error);
                        ent.record.last_error = Some(ProtocolError::new(
                            ErrorCode::LeaseExpired,
                            "lease expired before setup completed",
                        ));
                        Self::teardown_transport(&mut ent).await;
                        self.persist(&ent.record);
                    }
                }
                _ => {}
            }
        }
    }

    /// Load every record from the state directory, restore entries, and
    /// re-subscribe to event streams for delegations that were mid-flight.
    pub async fn recover_all(self: &Arc<Self>) -> Vec<RecoverOutcome> {
        let mut outcomes = Vec::new();
        for (path, result) in load_records(&self.config.state_dir) {
            match result {
                Err(e) => {
                    outcomes.push(RecoverOutcome {
                        delegation_id: path
                            .file_stem()
                            .map(|s| s.to_string_lossy().into_owned()),
                        path,
                        state: None,
                        resumed: false,
                        error: Some(e),
                    });
                }
                Ok(record) => {
                    let machine = match record.rebuild_machine() {
                        Ok(m) => m,
                        Err(e) => {
                            outcomes.push(RecoverOutcome {
                                delegation_id: Some(record.delegation_id.clone()),
                                path,
                                state: Some(record.state),
                                resumed: false,
                                error: Some(e),
                            });
                            continue;
                        }
                    };
                    let id = record.delegation_id.clone();
                    let state = record.state;
                    let entry: Entry = Arc::new(AsyncMutex::new(DelegationEntry {
                        record,
                        machine,
                        transport: None,
                        pump: None,
                    }));
                    let resumed = matches!(
                        state,
                        DelegationState::Started | DelegationState::Running
                    );
                    {
                        let mut map = self.entries.lock().expect("entry map");
                        if map.contains_key(&id) {
                            // Already live in this process; leave it alone.
                            outcomes.push(RecoverOutcome {
                                delegation_id: Some(id),
                                path,
                                state: Some(state),
                                resumed: false,
                                error: None,
                            });
                            continue;
                        }
                        map.insert(id.clone(), entry.clone());
                    }
                    if resumed {
                        let mut ent = entry.lock().await;
                        self.arm_pump(&id, &entry, &mut ent);
                    }
                    outcomes.push(RecoverOutcome {
                        delegation_id: Some(id),
                        path,
                        state: Some(state),
                        resumed,
                        error: None,
                    });
                }
            }
        }
        outcomes
    }

    /// Drop all in-memory state without touching disk or peers, as a crash
    /// would. Recovery tests restart from the state directory afterwards.
    pub fn shutdown_abrupt(&self) {
        if let Some(scan) = self.scan.lock().expect("scan slot").take() {
            scan.abort();
        }
        let mut map = self.entries.lock().expect("entry map");
        for entry in map.values() {
            // try_lock never fails here for a genuinely crashed process;
            // in tests a pump may hold the lock briefly, in which case its
            // task is aborted anyway.
            if let Ok(mut ent) = entry.try_lock() {
                if let Some(pump) = ent.pump.take() {
                    pump.abort();
                }
            }
        }
        map.clear();
    }

    /// Path of one delegation's record file, for operators and tests.
    pub fn record_file(&self, delegation_id: &str) -> PathBuf {
        record_path(&self.config.state_dir, delegation_id)
    }
}
