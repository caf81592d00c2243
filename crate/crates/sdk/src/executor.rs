//! Executor-side service: invitation admission, assignment lifecycle,
//! workspace provisioning, backend supervision, lease enforcement, and the
//! per-delegation event stream.
//!
//! Concurrency model: a std mutex guards the assignment map and is never
//! held across an await; each assignment sits behind its own async mutex.
//! Every terminal path (backend completion, lease expiry, pushed error,
//! shutdown) takes that lock, checks for a terminal state, and only the
//! first one through performs the terminal work.

use crate::backend::{Backend, BackendContext, PidSlot, ProgressSink};
use crate::events::{Channel, EventHub, EventName};
use awcp_core::{
    capabilities_for, is_expired, negotiate_lease, AcceptPayload, AssignmentEvent,
    AssignmentState, AssignmentStateMachine, ErrorCode, ExecutorConstraints, LeaseMode, Message,
    Payload, ProtocolError, TaskSpec, Transition, TransportHandle, TransportKind,
};
use awcp_transport::{executor_transport, ExecutorTransport, ExecutorTransportConfig};
use chrono::Utc;
use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex as StdMutex};
use std::time::Duration;
use tokio::sync::Mutex as AsyncMutex;
use tokio::task::JoinHandle;

/// Admission limits this executor advertises and enforces.
#[derive(Debug, Clone)]
pub struct ExecutorPolicy {
    /// Parent directory for per-delegation work directories.
    pub work_dir_base: PathBuf,
    /// Ceiling on granted lease duration, advertised in ACCEPT.
    pub max_ttl_seconds: u64,
    pub allowed_modes: Vec<LeaseMode>,
    /// Invitations beyond this many live assignments are declined.
    pub max_concurrent_assignments: usize,
    pub accepted_transport_kinds: Vec<TransportKind>,
}

impl ExecutorPolicy {
    pub fn new(work_dir_base: impl Into<PathBuf>) -> Self {
        ExecutorPolicy {
            work_dir_base: work_dir_base.into(),
            max_ttl_seconds: 3600,
            allowed_modes: vec![LeaseMode::ReadOnly, LeaseMode::ReadWrite],
            max_concurrent_assignments: 8,
            accepted_transport_kinds: vec![
                TransportKind::Archive,
                TransportKind::Storage,
                TransportKind::Git,
                TransportKind::LoopbackLive,
            ],
        }
    }

    fn constraints(&self) -> ExecutorConstraints {
        ExecutorConstraints {
            max_ttl_seconds: self.max_ttl_seconds,
            allowed_modes: self.allowed_modes.clone(),
        }
    }
}

pub struct ExecutorConfig {
    pub policy: ExecutorPolicy,
    pub backend: Arc<dyn Backend>,
    /// Cadence of mid-run snapshot captures on read-write leases over
    /// snapshot-capable transports. Zero disables them.
    pub snapshot_interval: Duration,
    /// How long a finished assignment waits for the delegator's ACK before
    /// reclaiming resources anyway.
    pub ack_timeout: Duration,
    /// How long an accepted invitation may sit without START.
    pub pending_timeout: Duration,
    /// Bearer token required on every route when set.
    pub auth_token: Option<String>,
    pub transport: ExecutorTransportConfig,
}

impl ExecutorConfig {
    pub fn new(work_dir_base: impl Into<PathBuf>, backend: Arc<dyn Backend>) -> Self {
        ExecutorConfig {
            policy: ExecutorPolicy::new(work_dir_base),
            backend,
            snapshot_interval: Duration::from_secs(30),
            ack_timeout: Duration::from_secs(60),
            pending_timeout: Duration::from_secs(120),
            auth_token: None,
            transport: ExecutorTransportConfig::default(),
        }
    }
}

/// ACK receipt latch. Lives outside the assignment lock so the finished
/// assignment can wait on it while the ack route takes the lock.
#[derive(Default)]
struct AckGate {
    received: StdMutex<bool>,
    notify: tokio::sync::Notify,
}

impl AckGate {
    fn set(&self) {
        *self.received.lock().expect("ack gate") = true;
        self.notify.notify_waiters();
    }

    fn is_set(&self) -> bool {
        *self.received.lock().expect("ack gate")
    }

    async fn wait(&self, timeout: Duration) -> bool {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let notified = self.notify.notified();
            // Arm before checking so a set() between check and await still
            // wakes this waiter.
            if self.is_set() {
                return true;
            }
            if tokio::time::timeout_at(deadline, notified).await.is_err() {
                return self.is_set();
            }
        }
    }
}

struct Assignment {
    machine: AssignmentStateMachine,
    task: TaskSpec,
    environment: awcp_core::EnvironmentDeclaration,
    transport_kind: TransportKind,
    constraints: ExecutorConstraints,
    work_dir: PathBuf,
    lease: Option<awcp_core::ActiveLease>,
    transport: Option<Box<dyn ExecutorTransport>>,
    driver: Option<JoinHandle<()>>,
    lease_timer: Option<JoinHandle<()>>,
    snapshot_ticker: Option<JoinHandle<()>>,
    pending_timer: Option<JoinHandle<()>>,
    pid: PidSlot,
    ack: Arc<AckGate>,
    snapshot_seq: u32,
    /// True while this assignment counts against the concurrency budget.
    counted: bool,
}

impl Assignment {
    fn abort_timers(&mut self) {
        for handle in [
            self.lease_timer.take(),
            self.snapshot_ticker.take(),
            self.pending_timer.take(),
        ]
        .into_iter()
        .flatten()
        {
            handle.abort();
        }
    }

    fn abort_driver(&mut self) {
        if let Some(handle) = self.driver.take() {
            handle.abort();
        }
    }

    /// Detach and release the transport, or sweep the work directory by
    /// hand when no transport was ever constructed.
    async fn drop_transport(&mut self) {
        if let Some(mut transport) = self.transport.take() {
            let _ = transport.detach(&self.work_dir).await;
            let _ = transport.release(&self.work_dir).await;
        } else if self.work_dir.exists() {
            let _ = std::fs::remove_dir_all(&self.work_dir);
        }
    }
}

type Entry = Arc<AsyncMutex<Assignment>>;

pub struct ExecutorService {
    config: ExecutorConfig,
    hub: EventHub,
    assignments: StdMutex<HashMap<String, Entry>>,
    live: AtomicUsize,
}

/// Build an ERROR envelope reply.
fn error_reply(delegation_id: &str, err: ProtocolError) -> Message {
    Message::new(delegation_id, Payload::Error(err))
}

/// Delegation ids become directory names; refuse anything that could step
/// outside the work dir base.
fn id_is_pathsafe(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && !id.contains('/')
        && !id.contains('\\')
        && !id.contains('\0')
}

impl ExecutorService {
    pub fn new(config: ExecutorConfig) -> Arc<Self> {
        Arc::new(ExecutorService {
            config,
            hub: EventHub::new(),
            assignments: StdMutex::new(HashMap::new()),
            live: AtomicUsize::new(0),
        })
    }

    pub fn auth_token(&self) -> Option<&str> {
        self.config.auth_token.as_deref()
    }

    fn entry(&self, delegation_id: &str) -> Option<Entry> {
        self.assignments.lock().expect("assignment map").get(delegation_id).cloned()
    }

    pub fn channel(&self, delegation_id: &str) -> Option<Arc<Channel>> {
        self.hub.get(delegation_id)
    }

    pub fn snapshot_payload(&self, delegation_id: &str, snapshot_id: &str) -> Option<String> {
        self.hub.get(delegation_id)?.snapshot_json(snapshot_id)
    }

    fn mark_terminal(&self, asg: &mut Assignment) {
        if asg.counted {
            asg.counted = false;
            self.live.fetch_sub(1, Ordering::SeqCst);
        }
    }

    /// Decide an INVITE. The reply is ACCEPT or an ERROR envelope; declines
    /// are a negotiated outcome and ride on 200, duplicates on 409.
    pub async fn handle_invite(self: &Arc<Self>, msg: &Message) -> (u16, Message) {
        let id = msg.delegation_id.clone();
        let invite = match &msg.payload {
            Payload::Invite(p) => p.clone(),
            _ => {
                let err = ProtocolError::new(
                    ErrorCode::MalformedMessage,
                    format!("expected INVITE, got {}", msg.message_type()),
                );
                return (400, error_reply(&id, err));
            }
        };
        if let Err(detail) = msg.validate() {
            return (400, error_reply(&id, ProtocolError::new(ErrorCode::MalformedMessage, detail)));
        }
        if !id_is_pathsafe(&id) {
            let err = ProtocolError::new(
                ErrorCode::MalformedMessage,
                "delegationId is not usable as a directory name",
            );
            return (400, error_reply(&id, err));
        }

        if !self.config.policy.accepted_transport_kinds.contains(&invite.transport_kind) {
            let err = ProtocolError::new(
                ErrorCode::Declined,
                format!("transport kind {} is not accepted here", invite.transport_kind),
            );
            return (200, error_reply(&id, err));
        }
        if let Err(e) = awcp_transport::check_prerequisites(invite.transport_kind).await {
            let err = ProtocolError::new(
                ErrorCode::Declined,
                format!("transport {} is not usable: {e}", invite.transport_kind),
            );
            return (200, error_reply(&id, err));
        }
        let constraints = self.config.policy.constraints();
        if let Err(e) = negotiate_lease(&invite.lease, &constraints) {
            return (200, error_reply(&id, e));
        }

        let work_dir = self.config.policy.work_dir_base.join(&id);
        {
            let mut map = self.assignments.lock().expect("assignment map");
            if map.contains_key(&id) {
                let err = ProtocolError::new(
                    ErrorCode::Duplicate,
                    format!("delegation {id} was already invited"),
                );
                return (409, error_reply(&id, err));
            }
            if self.live.load(Ordering::SeqCst) >= self.config.policy.max_concurrent_assignments {
                let err = ProtocolError::new(
                    ErrorCode::Declined,
                    "executor is at its concurrent assignment limit",
                );
                return (200, error_reply(&id, err));
            }
            if let Err(e) = prepare_work_dir(&work_dir) {
                let err = ProtocolError::new(
                    ErrorCode::Internal,
                    format!("could not prepare work directory: {e}"),
                );
                return (500, error_reply(&id, err));
            }
            let assignment = Assignment {
                machine: AssignmentStateMachine::new(),
                task: invite.task.clone(),
                environment: invite.environment.clone(),
                transport_kind: invite.transport_kind,
                constraints: constraints.clone(),
                work_dir: work_dir.clone(),
                lease: None,
                transport: None,
                driver: None,
                lease_timer: None,
                snapshot_ticker: None,
                pending_timer: None,
                pid: PidSlot::default(),
                ack: Arc::new(AckGate::default()),
                snapshot_seq: 0,
                counted: true,
            };
            self.live.fetch_add(1, Ordering::SeqCst);
            map.insert(id.clone(), Arc::new(AsyncMutex::new(assignment)));
        }
        self.hub.open(&id);
        self.arm_pending_timer(&id).await;

        tracing::info!(delegation = %id, "invitation accepted");
        let accept = AcceptPayload {
            work_dir: work_dir.to_string_lossy().into_owned(),
            constraints,
        };
        (200, Message::new(&id, Payload::Accept(accept)))
    }

    async fn arm_pending_timer(self: &Arc<Self>, delegation_id: &str) {
        let Some(entry) = self.entry(delegation_id) else { return };
        let service = self.clone();
        let id = delegation_id.to_string();
        let wait = self.config.pending_timeout;
        let timer_entry = entry.clone();
        let handle = tokio::spawn(async move {
            tokio::time::sleep(wait).await;
            let mut asg = timer_entry.lock().await;
            if asg.machine.state() != AssignmentState::Pending {
                return;
            }
            tracing::warn!(delegation = %id, "invitation timed out waiting for START");
            let err = ProtocolError::new(
                ErrorCode::LeaseExpired,
                "invitation expired before START arrived",
            );
            if let Some(ch) = service.hub.get(&id) {
                ch.publish(EventName::Error, serde_json::to_string(&err).expect("plain data"));
                ch.close();
            }
            let _ = asg.machine.apply(AssignmentEvent::Error, Utc::now());
            service.mark_terminal(&mut asg);
            asg.drop_transport().await;
        });
        entry.lock().await.pending_timer = Some(handle);
    }

    /// Act on START: validate the activated lease against what was
    /// advertised, transition to active, and kick off provisioning plus the
    /// backend in a supervised task. Replies `Ok` once the assignment is
    /// accepted; setup failures after that surface on the event stream.
    pub async fn handle_start(self: &Arc<Self>, msg: &Message) -> Result<(), (u16, Message)> {
        let id = msg.delegation_id.clone();
        let start = match &msg.payload {
            Payload::Start(p) => p.clone(),
            _ => {
                let err = ProtocolError::new(
                    ErrorCode::MalformedMessage,
                    format!("expected START, got {}", msg.message_type()),
                );
                return Err((400, error_reply(&id, err)));
            }
        };
        let Some(entry) = self.entry(&id) else {
            let err = ProtocolError::new(
                ErrorCode::UnknownDelegation,
                format!("no assignment for delegation {id}"),
            );
            return Err((404, error_reply(&id, err)));
        };

        let mut asg = entry.lock().await;
        if asg.machine.state() != AssignmentState::Pending {
            let err = ProtocolError::new(
                ErrorCode::InvalidTransition,
                format!("START is not legal in state {}", asg.machine.state()),
            );
            return Err((409, error_reply(&id, err)));
        }

        let now = Utc::now();
        if is_expired(&start.lease, now) {
            let err =
                ProtocolError::new(ErrorCode::LeaseExpired, "lease was already expired at START");
            return Err((409, error_reply(&id, err)));
        }
        if !asg.constraints.allowed_modes.contains(&start.lease.mode) {
            let err = ProtocolError::new(
                ErrorCode::LeaseViolation,
                format!("mode {} was not offered in ACCEPT", start.lease.mode),
            );
            return Err((409, error_reply(&id, err)));
        }
        // Generous skew allowance: the delegator activated the lease on its
        // own clock moments ago.
        let ceiling = now
            + chrono::Duration::seconds(asg.constraints.max_ttl_seconds as i64)
            + chrono::Duration::seconds(10);
        if start.lease.expires_at > ceiling {
            let err = ProtocolError::new(
                ErrorCode::LeaseViolation,
                format!(
                    "lease expiry {} exceeds the advertised ceiling of {}s",
                    start.lease.expires_at, asg.constraints.max_ttl_seconds
                ),
            );
            return Err((409, error_reply(&id, err)));
        }
        if start.transport.kind() != asg.transport_kind {
            let err = ProtocolError::new(
                ErrorCode::TransportUnavailable,
                format!(
                    "START carries a {} handle but the invitation agreed on {}",
                    start.transport.kind(),
                    asg.transport_kind
                ),
            );
            return Err((409, error_reply(&id, err)));
        }

        asg.machine
            .apply(AssignmentEvent::RecvStart, now)
            .expect("RECV_START is legal in pending");
        asg.lease = Some(start.lease);
        if let Some(timer) = asg.pending_timer.take() {
            timer.abort();
        }

        self.arm_lease_timer(&id, &entry, &mut asg, start.lease.expires_at);

        let service = self.clone();
        let driver_entry = entry.clone();
        let driver_id = id.clone();
        let handle = start.transport.clone();
        asg.driver = Some(tokio::spawn(async move {
            service.drive(driver_id, driver_entry, handle).await;
        }));

        tracing::info!(delegation = %id, mode = %start.lease.mode, "assignment activated");
        Ok(())
    }

    fn arm_lease_timer(
        self: &Arc<Self>,
        delegation_id: &str,
        entry: &Entry,
        asg: &mut Assignment,
        expires_at: chrono::DateTime<chrono::Utc>,
    ) {
        let service = self.clone();
        let id = delegation_id.to_string();
        let timer_entry = entry.clone();
        asg.lease_timer = Some(tokio::spawn(async move {
            let wait = (expires_at - Utc::now()).to_std().unwrap_or(Duration::ZERO);
            tokio::time::sleep(wait).await;
            service.expire(&id, &timer_entry).await;
        }));
    }

    /// Lease ran out: kill the backend, report the expiry, reclaim.
    async fn expire(self: &Arc<Self>, delegation_id: &str, entry: &Entry) {
        let mut asg = entry.lock().await;
        if asg.machine.state().is_terminal() {
            return;
        }
        tracing::warn!(delegation = %delegation_id, "lease expired, terminating the backend");
        asg.abort_driver();
        asg.abort_timers();
        let err = ProtocolError::new(ErrorCode::LeaseExpired, "lease expired before completion");
        if let Some(ch) = self.hub.get(delegation_id) {
            ch.publish(EventName::Error, serde_json::to_string(&err).expect("plain data"));
            ch.close();
        }
        let _ = asg.machine.apply(AssignmentEvent::Error, Utc::now());
        self.mark_terminal(&mut asg);
        asg.drop_transport().await;
    }

    /// Provision the workspace, announce running, run the backend, then
    /// finalize. Runs as the assignment's driver task; aborting it kills
    /// the backend process.
    async fn drive(self: Arc<Self>, delegation_id: String, entry: Entry, handle: TransportHandle) {
        let channel = self.hub.get(&delegation_id).expect("channel opened at invite");

        let (ctx, pid) = {
            let mut asg = entry.lock().await;
            if asg.machine.state() != AssignmentState::Active {
                return;
            }
            let lease = asg.lease.expect("lease stored at START");
            let mut transport = match executor_transport(
                asg.transport_kind,
                &asg.environment,
                &self.config.transport,
            ) {
                Ok(t) => t,
                Err(e) => {
                    self.fail_locked(&delegation_id, &mut asg, e.into()).await;
                    return;
                }
            };
            if let Err(e) = transport.provision(&handle, &asg.work_dir, lease.mode).await {
                tracing::warn!(delegation = %delegation_id, error = %e, "provisioning failed");
                self.fail_locked(&delegation_id, &mut asg, e.into()).await;
                return;
            }
            asg.transport = Some(transport);

            // Announcement payload is fixed by the wire contract.
            channel.publish(EventName::Status, "{\"state\":\"running\"}".to_string());

            let caps = capabilities_for(asg.transport_kind);
            if lease.mode == LeaseMode::ReadWrite
                && caps.supports_snapshots
                && !self.config.snapshot_interval.is_zero()
            {
                self.arm_snapshot_ticker(&delegation_id, &entry, &mut asg);
            }

            let ctx = BackendContext {
                delegation_id: delegation_id.clone(),
                work_dir: asg.work_dir.clone(),
                task: asg.task.clone(),
                lease_mode: lease.mode,
                deadline: lease.expires_at,
            };
            (ctx, asg.pid.clone())
        };

        let progress_channel = channel.clone();
        let sink = ProgressSink::new(move |line| {
            let data = serde_json::json!({ "state": "running", "detail": line });
            progress_channel.publish(EventName::Status, data.to_string());
        });

        let outcome = self.config.backend.run(ctx, sink, pid).await;
        self.finalize(&delegation_id, &entry, outcome).await;
    }

    fn arm_snapshot_ticker(
        self: &Arc<Self>,
        delegation_id: &str,
        entry: &Entry,
        asg: &mut Assignment,
    ) {
        let service = self.clone();
        let id = delegation_id.to_string();
        let ticker_entry = entry.clone();
        let period = self.config.snapshot_interval;
        asg.snapshot_ticker = Some(tokio::spawn(async move {
            let mut tick = tokio::time::interval(period);
            tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            tick.tick().await;
            loop {
                tick.tick().await;
                let mut asg = ticker_entry.lock().await;
                if asg.machine.state().is_terminal() {
                    return;
                }
                // A failed periodic capture is retried next tick; the final
                // capture at completion is the one that must not fail.
                if let Err(e) = service.capture_and_publish(&id, &mut asg, false).await {
                    tracing::warn!(delegation = %id, error = %e.message, "snapshot capture failed");
                }
            }
        }));
    }

    async fn capture_and_publish(
        &self,
        delegation_id: &str,
        asg: &mut Assignment,
        recommended: bool,
    ) -> Result<(), ProtocolError> {
        let work_dir = asg.work_dir.clone();
        asg.snapshot_seq += 1;
        let snapshot_id = format!("s{}", asg.snapshot_seq);
        let transport = asg.transport.as_mut().ok_or_else(|| {
            ProtocolError::new(ErrorCode::InvalidState, "no transport to capture with")
        })?;
        let descriptor = transport
            .capture_snapshot(&work_dir, &snapshot_id, recommended)
            .await
            .map_err(ProtocolError::from)?;
        if let Some(ch) = self.hub.get(delegation_id) {
            let json = serde_json::to_string(&descriptor).expect("plain data");
            ch.publish_snapshot(&descriptor.snapshot_id, json);
        }
        Ok(())
    }

    /// Terminal failure while holding the assignment lock: emit the error,
    /// transition, reclaim. Used by setup failures and backend failures.
    async fn fail_locked(&self, delegation_id: &str, asg: &mut Assignment, err: ProtocolError) {
        if asg.machine.state().is_terminal() {
            return;
        }
        asg.abort_timers();
        if let Some(ch) = self.hub.get(delegation_id) {
            ch.publish(EventName::Error, serde_json::to_string(&err).expect("plain data"));
            ch.close();
        }
        let _ = asg.machine.apply(AssignmentEvent::Error, Utc::now());
        self.mark_terminal(asg);
        asg.drop_transport().await;
    }

    /// Backend finished. First terminal path wins; if the lease timer or a
    /// pushed error got there first this is a no-op.
    async fn finalize(
        self: &Arc<Self>,
        delegation_id: &str,
        entry: &Entry,
        outcome: crate::backend::BackendOutcome,
    ) {
        let ack = {
            let mut asg = entry.lock().await;
            if asg.machine.state().is_terminal() {
                return;
            }
            asg.abort_timers();

            if !outcome.success {
                let err = ProtocolError::new(ErrorCode::BackendFailed, outcome.summary.clone());
                self.fail_locked(delegation_id, &mut asg, err).await;
                return;
            }

            let lease_mode = asg.lease.map(|l| l.mode).unwrap_or(LeaseMode::ReadOnly);
            let caps = capabilities_for(asg.transport_kind);
            if lease_mode == LeaseMode::ReadWrite && caps.supports_snapshots {
                // The result travels by snapshot on these transports, so a
                // failed final capture fails the delegation.
                if let Err(e) = self.capture_and_publish(delegation_id, &mut asg, true).await {
                    tracing::warn!(delegation = %delegation_id, error = %e.message, "final capture failed");
                    self.fail_locked(delegation_id, &mut asg, e).await;
                    return;
                }
            }

            let done = awcp_core::DonePayload {
                final_summary: outcome.summary.clone(),
                highlights: outcome.highlights.clone(),
            };
            let channel = self.hub.get(delegation_id).expect("channel opened at invite");
            channel.publish(EventName::Done, serde_json::to_string(&done).expect("plain data"));
            asg.machine
                .apply(AssignmentEvent::TaskComplete, Utc::now())
                .expect("TASK_COMPLETE is legal in active");
            self.mark_terminal(&mut asg);

            let work_dir = asg.work_dir.clone();
            if let Some(transport) = asg.transport.as_mut() {
                let _ = transport.detach(&work_dir).await;
            }
            channel.close();
            tracing::info!(delegation = %delegation_id, "assignment completed");
            asg.ack.clone()
        };

        // The lock is dropped while waiting so the ack route can take it.
        let acked = ack.wait(self.config.ack_timeout).await;
        if !acked {
            tracing::warn!(delegation = %delegation_id, "no ACK before timeout, reclaiming anyway");
        }
        let mut asg = entry.lock().await;
        asg.drop_transport().await;
    }

    /// Record the delegator's receipt of DONE. Idempotent.
    pub async fn handle_ack(&self, delegation_id: &str) -> Result<(), (u16, Message)> {
        let Some(entry) = self.entry(delegation_id) else {
            let err = ProtocolError::new(
                ErrorCode::UnknownDelegation,
                format!("no assignment for delegation {delegation_id}"),
            );
            return Err((404, error_reply(delegation_id, err)));
        };
        let asg = entry.lock().await;
        asg.ack.set();
        Ok(())
    }

    /// The delegator pushed an ERROR envelope (cancellation, integrity
    /// failure on its side). Stop work and reclaim. Idempotent once
    /// terminal.
    pub async fn handle_error_push(&self, delegation_id: &str, err: &ProtocolError) -> Result<(), (u16, Message)> {
        let Some(entry) = self.entry(delegation_id) else {
            let reply = ProtocolError::new(
                ErrorCode::UnknownDelegation,
                format!("no assignment for delegation {delegation_id}"),
            );
            return Err((404, error_reply(delegation_id, reply)));
        };
        let mut asg = entry.lock().await;
        if asg.machine.state().is_terminal() {
            return Ok(());
        }
        tracing::info!(delegation = %delegation_id, code = %err.code, "delegator terminated the assignment");
        asg.abort_driver();
        asg.abort_timers();
        if let Some(ch) = self.hub.get(delegation_id) {
            ch.publish(EventName::Error, serde_json::to_string(err).expect("plain data"));
            ch.close();
        }
        let _ = asg.machine.apply(AssignmentEvent::Cancel, Utc::now());
        self.mark_terminal(&mut asg);
        asg.drop_transport().await;
        Ok(())
    }

    /// Stop every live assignment and reclaim its resources. Used on
    /// operator shutdown.
    pub async fn shutdown_graceful(self: &Arc<Self>) {
        let entries: Vec<(String, Entry)> = {
            let map = self.assignments.lock().expect("assignment map");
            map.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
        };
        for (id, entry) in entries {
            let mut asg = entry.lock().await;
            if asg.machine.state().is_terminal() {
                continue;
            }
            asg.abort_driver();
            asg.abort_timers();
            let err = ProtocolError::new(ErrorCode::Cancelled, "executor is shutting down");
            if let Some(ch) = self.hub.get(&id) {
                ch.publish(EventName::Error, serde_json::to_string(&err).expect("plain data"));
                ch.close();
            }
            let _ = asg.machine.apply(AssignmentEvent::Cancel, Utc::now());
            self.mark_terminal(&mut asg);
            asg.drop_transport().await;
        }
    }

    pub async fn assignment_state(&self, delegation_id: &str) -> Option<AssignmentState> {
        let entry = self.entry(delegation_id)?;
        let asg = entry.lock().await;
        Some(asg.machine.state())
    }

    pub async fn assignment_history(
        &self,
        delegation_id: &str,
    ) -> Option<Vec<Transition<AssignmentState, AssignmentEvent>>> {
        let entry = self.entry(delegation_id)?;
        let asg = entry.lock().await;
        Some(asg.machine.history().to_vec())
    }

    pub async fn backend_pid(&self, delegation_id: &str) -> Option<u32> {
        let entry = self.entry(delegation_id)?;
        let asg = entry.lock().await;
        let pid = *asg.pid.lock().expect("pid slot");
        pid
    }

    pub async fn work_dir(&self, delegation_id: &str) -> Option<PathBuf> {
        let entry = self.entry(delegation_id)?;
        let asg = entry.lock().await;
        Some(asg.work_dir.clone())
    }
}

/// Create an empty per-delegation work directory, sweeping any leftover
/// from a crashed prior run.
fn prepare_work_dir(path: &std::path::Path) -> std::io::Result<()> {
    if path.exists() {
        std::fs::remove_dir_all(path)?;
    }
    std::fs::create_dir_all(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::CommandBackend;
    use awcp_core::{
        ActiveLease, EnvironmentDeclaration, InvitePayload, LeaseConfig, StartPayload,
    };
    use awcp_transport::{
        delegator_transport, DelegatorTransportConfig, PatternSet, WorkspaceManifest,
    };

    fn shell(script: &str) -> Arc<dyn Backend> {
        Arc::new(CommandBackend::new("/bin/sh").with_args(vec!["-c".into(), script.into()]))
    }

    fn service_with(
        base: &std::path::Path,
        backend: Arc<dyn Backend>,
        tune: impl FnOnce(&mut ExecutorConfig),
    ) -> Arc<ExecutorService> {
        let mut config = ExecutorConfig::new(base, backend);
        config.ack_timeout = Duration::from_millis(300);
        tune(&mut config);
        ExecutorService::new(config)
    }

    fn invite(id: &str, ttl: u64, mode: LeaseMode) -> Message {
        Message::new(
            id,
            Payload::Invite(InvitePayload {
                task: TaskSpec {
                    description: "demo".into(),
                    agent_prompt: "work on the files".into(),
                },
                lease: LeaseConfig { ttl_seconds: ttl, mode },
                environment: EnvironmentDeclaration::everything(),
                transport_kind: TransportKind::Archive,
            }),
        )
    }

    async fn archive_handle(workspace: &std::path::Path) -> TransportHandle {
        let manifest =
            WorkspaceManifest::capture(workspace, &PatternSet::everything(), false).unwrap();
        let mut packer = delegator_transport(
            TransportKind::Archive,
            "packer",
            &DelegatorTransportConfig::default(),
        )
        .unwrap();
        packer.package(workspace, &manifest).await.unwrap()
    }

    fn start(id: &str, handle: TransportHandle, mode: LeaseMode, ttl_secs: i64) -> Message {
        Message::new(
            id,
            Payload::Start(StartPayload {
                lease: ActiveLease {
                    expires_at: Utc::now() + chrono::Duration::seconds(ttl_secs),
                    mode,
                },
                transport: handle,
            }),
        )
    }

    async fn wait_for_state(
        service: &Arc<ExecutorService>,
        id: &str,
        want: AssignmentState,
    ) -> bool {
        for _ in 0..200 {
            if service.assignment_state(id).await == Some(want) {
                return true;
            }
            tokio::time::sleep(Duration::from_millis(25)).await;
        }
        false
    }

    #[tokio::test]
    async fn invite_start_backend_done_walks_the_full_lifecycle() {
        let workspace = tempfile::tempdir().unwrap();
        std::fs::write(workspace.path().join("input.txt"), "payload\n").unwrap();
        let base = tempfile::tempdir().unwrap();
        let service = service_with(
            base.path(),
            shell("test -f input.txt && echo AWCP_SUMMARY: saw the input && echo extra > out.txt"),
            |_| {},
        );

        let (status, reply) = service.handle_invite(&invite("d-full", 300, LeaseMode::ReadWrite)).await;
        assert_eq!(status, 200);
        let Payload::Accept(accept) = &reply.payload else {
            panic!("expected ACCEPT, got {reply:?}");
        };
        assert!(accept.work_dir.ends_with("d-full"));
        assert_eq!(service.assignment_state("d-full").await, Some(AssignmentState::Pending));

        let handle = archive_handle(workspace.path()).await;
        service
            .handle_start(&start("d-full", handle, LeaseMode::ReadWrite, 300))
            .await
            .unwrap();
        assert!(wait_for_state(&service, "d-full", AssignmentState::Completed).await);

        let channel = service.channel("d-full").unwrap();
        let events = channel.next_after(0).await.unwrap();
        assert_eq!(events[0].name, EventName::Status);
        assert_eq!(events[0].data, "{\"state\":\"running\"}");
        let names: Vec<&str> = events.iter().map(|e| e.name.as_str()).collect();
        // Read-write archive lease: the final capture precedes DONE.
        assert!(names.contains(&"snapshot"), "events were {names:?}");
        assert_eq!(*names.last().unwrap(), "done");
        let done = events.last().unwrap();
        assert!(done.data.contains("saw the input"));

        // ACK releases the work directory.
        let work_dir = service.work_dir("d-full").await.unwrap();
        service.handle_ack("d-full").await.unwrap();
        for _ in 0..100 {
            if !work_dir.exists() {
                break;
            }
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
        assert!(!work_dir.exists(), "work dir should be reclaimed after ACK");

        let history = service.assignment_history("d-full").await.unwrap();
        let steps: Vec<(AssignmentState, AssignmentState)> =
            history.iter().map(|t| (t.from, t.to)).collect();
        assert_eq!(
            steps,
            vec![
                (AssignmentState::Pending, AssignmentState::Active),
                (AssignmentState::Active, AssignmentState::Completed),
            ]
        );
    }

    #[tokio::test]
    async fn duplicate_invite_is_a_conflict() {
        let base = tempfile::tempdir().unwrap();
        let service = service_with(base.path(), shell("true"), |_| {});
        let msg = invite("d-dup", 60, LeaseMode::ReadOnly);
        let (first, _) = service.handle_invite(&msg).await;
        assert_eq!(first, 200);
        let (second, reply) = service.handle_invite(&msg).await;
        assert_eq!(second, 409);
        let Payload::Error(e) = reply.payload else { panic!("expected ERROR") };
        assert_eq!(e.code, ErrorCode::Duplicate);
    }

    #[tokio::test]
    async fn start_without_an_invitation_is_unknown() {
        let base = tempfile::tempdir().unwrap();
        let service = service_with(base.path(), shell("true"), |_| {});
        let workspace = tempfile::tempdir().unwrap();
        let err = service
            .handle_start(&start("d-ghost", archive_handle(workspace.path()).await, LeaseMode::ReadOnly, 60))
            .await
            .unwrap_err();
        assert_eq!(err.0, 404);
        let Payload::Error(e) = err.1.payload else { panic!("expected ERROR") };
        assert_eq!(e.code, ErrorCode::UnknownDelegation);
    }

    #[tokio::test]
    async fn start_is_validated_against_the_advertised_constraints() {
        let base = tempfile::tempdir().unwrap();
        let workspace = tempfile::tempdir().unwrap();
        std::fs::write(workspace.path().join("f"), "x").unwrap();
        let service = service_with(base.path(), shell("true"), |c| {
            c.policy.max_ttl_seconds = 60;
            c.policy.allowed_modes = vec![LeaseMode::ReadOnly];
        });

        let expect_code = |reply: (u16, Message), code: ErrorCode| {
            assert_eq!(reply.0, 409);
            let Payload::Error(e) = reply.1.payload else { panic!("expected ERROR") };
            assert_eq!(e.code, code);
        };

        service.handle_invite(&invite("d-v", 60, LeaseMode::ReadOnly)).await;
        let handle = archive_handle(workspace.path()).await;

        // Expired on arrival.
        let expired = start("d-v", handle.clone(), LeaseMode::ReadOnly, -5);
        expect_code(
            service.handle_start(&expired).await.unwrap_err(),
            ErrorCode::LeaseExpired,
        );
        // Mode never offered.
        let bad_mode = start("d-v", handle.clone(), LeaseMode::ReadWrite, 30);
        expect_code(
            service.handle_start(&bad_mode).await.unwrap_err(),
            ErrorCode::LeaseViolation,
        );
        // TTL past the advertised ceiling plus skew.
        let bad_ttl = start("d-v", handle.clone(), LeaseMode::ReadOnly, 3600);
        expect_code(
            service.handle_start(&bad_ttl).await.unwrap_err(),
            ErrorCode::LeaseViolation,
        );
        // Handle kind differing from the invitation.
        let foreign = start(
            "d-v",
            TransportHandle::LoopbackLive { origin_path: workspace.path().to_string_lossy().into() },
            LeaseMode::ReadOnly,
            30,
        );
        expect_code(
            service.handle_start(&foreign).await.unwrap_err(),
            ErrorCode::TransportUnavailable,
        );

        // The assignment survived every rejected START.
        assert_eq!(service.assignment_state("d-v").await, Some(AssignmentState::Pending));
        let good = start("d-v", handle, LeaseMode::ReadOnly, 30);
        service.handle_start(&good).await.unwrap();
    }

    #[tokio::test]
    async fn lease_expiry_kills_the_backend_process() {
        let workspace = tempfile::tempdir().unwrap();
        std::fs::write(workspace.path().join("f"), "x").unwrap();
        let base = tempfile::tempdir().unwrap();
        let service = service_with(base.path(), shell("echo started; sleep 30"), |_| {});

        service.handle_invite(&invite("d-exp", 300, LeaseMode::ReadOnly)).await;
        service
            .handle_start(&start("d-exp", archive_handle(workspace.path()).await, LeaseMode::ReadOnly, 1))
            .await
            .unwrap();

        let mut pid = None;
        for _ in 0..100 {
            pid = service.backend_pid("d-exp").await;
            if pid.is_some() {
                break;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        let pid = pid.expect("backend pid published");

        assert!(wait_for_state(&service, "d-exp", AssignmentState::Error).await);
        // The kill signal lands asynchronously with the state change.
        let mut dead = false;
        for _ in 0..100 {
            if !std::path::Path::new(&format!("/proc/{pid}")).exists() {
                dead = true;
                break;
            }
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
        assert!(dead, "backend process {pid} survived lease expiry");

        let channel = service.channel("d-exp").unwrap();
        let events = channel.next_after(0).await.unwrap();
        let last = events.last().unwrap();
        assert_eq!(last.name, EventName::Error);
        assert!(last.data.contains("LEASE_EXPIRED"));
        assert!(!service.work_dir("d-exp").await.unwrap().exists());
    }

    #[tokio::test]
    async fn capacity_and_transport_rules_decline_invitations() {
        let base = tempfile::tempdir().unwrap();
        let service = service_with(base.path(), shell("true"), |c| {
            c.policy.max_concurrent_assignments = 1;
            c.policy.accepted_transport_kinds = vec![TransportKind::Archive];
        });

        let (s1, _) = service.handle_invite(&invite("d-one", 60, LeaseMode::ReadOnly)).await;
        assert_eq!(s1, 200);
        let (s2, reply) = service.handle_invite(&invite("d-two", 60, LeaseMode::ReadOnly)).await;
        assert_eq!(s2, 200);
        let Payload::Error(e) = reply.payload else { panic!("expected ERROR") };
        assert_eq!(e.code, ErrorCode::Declined);

        let mut wrong_kind = invite("d-three", 60, LeaseMode::ReadOnly);
        if let Payload::Invite(p) = &mut wrong_kind.payload {
            p.transport_kind = TransportKind::Git;
        }
        let (s3, reply) = service.handle_invite(&wrong_kind).await;
        assert_eq!(s3, 200);
        let Payload::Error(e) = reply.payload else { panic!("expected ERROR") };
        assert_eq!(e.code, ErrorCode::Declined);
    }

    #[tokio::test]
    async fn pending_timeout_reclaims_the_work_dir() {
        let base = tempfile::tempdir().unwrap();
        let service = service_with(base.path(), shell("true"), |c| {
            c.pending_timeout = Duration::from_millis(100);
        });
        service.handle_invite(&invite("d-stale", 60, LeaseMode::ReadOnly)).await;
        let work_dir = service.work_dir("d-stale").await.unwrap();
        assert!(work_dir.exists());
        assert!(wait_for_state(&service, "d-stale", AssignmentState::Error).await);
        assert!(!work_dir.exists());
    }

    #[tokio::test]
    async fn pushed_error_cancels_an_active_assignment() {
        let workspace = tempfile::tempdir().unwrap();
        std::fs::write(workspace.path().join("f"), "x").unwrap();
        let base = tempfile::tempdir().unwrap();
        let service = service_with(base.path(), shell("sleep 30"), |_| {});

        service.handle_invite(&invite("d-cancel", 300, LeaseMode::ReadOnly)).await;
        service
            .handle_start(&start("d-cancel", archive_handle(workspace.path()).await, LeaseMode::ReadOnly, 300))
            .await
            .unwrap();
        assert!(wait_for_state(&service, "d-cancel", AssignmentState::Active).await);

        let err = ProtocolError::new(ErrorCode::Cancelled, "delegator cancelled");
        service.handle_error_push("d-cancel", &err).await.unwrap();
        assert_eq!(service.assignment_state("d-cancel").await, Some(AssignmentState::Error));
        assert!(!service.work_dir("d-cancel").await.unwrap().exists());

        // Idempotent once terminal.
        service.handle_error_push("d-cancel", &err).await.unwrap();
        assert_eq!(service.assignment_state("d-cancel").await, Some(AssignmentState::Error));
    }

    #[tokio::test]
    async fn unsafe_delegation_ids_are_rejected() {
        let base = tempfile::tempdir().unwrap();
        let service = service_with(base.path(), shell("true"), |_| {});
        for id in ["../escape", "a/b", "..", "a\\b"] {
            let (status, reply) = service.handle_invite(&invite(id, 60, LeaseMode::ReadOnly)).await;
            assert_eq!(status, 400, "id {id:?} must be rejected");
            let Payload::Error(e) = reply.payload else { panic!("expected ERROR") };
            assert_eq!(e.code, ErrorCode::MalformedMessage);
        }
    }

    #[tokio::test]
    async fn backend_failure_surfaces_as_backend_failed() {
        let workspace = tempfile::tempdir().unwrap();
        std::fs::write(workspace.path().join("f"), "x").unwrap();
        let base = tempfile::tempdir().unwrap();
        let service = service_with(
            base.path(),
            shell("echo AWCP_SUMMARY: could not find the ledger; exit 3"),
            |_| {},
        );
        service.handle_invite(&invite("d-fail", 300, LeaseMode::ReadOnly)).await;
        service
            .handle_start(&start("d-fail", archive_handle(workspace.path()).await, LeaseMode::ReadOnly, 300))
            .await
            .unwrap();
        assert!(wait_for_state(&service, "d-fail", AssignmentState::Error).await);

        let events = service.channel("d-fail").unwrap().next_after(0).await.unwrap();
        let last = events.last().unwrap();
        assert_eq!(last.name, EventName::Error);
        assert!(last.data.contains("BACKEND_FAILED"));
        assert!(last.data.contains("could not find the ledger"));
        assert!(!service.work_dir("d-fail").await.unwrap().exists());
    }
}
