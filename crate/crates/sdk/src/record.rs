//! The delegator's persistent view of one delegation. The record is the
//! unit of persistence and recovery; its `state` is always the fold of
//! `history` through the delegation transition table, and persistence
//! re-checks that before anything touches disk.

use awcp_core::{
    ActiveLease, DelegationEvent, DelegationState, DelegationStateMachine, DonePayload,
    EnvironmentDeclaration, LeaseConfig, ProtocolError, SnapshotDescriptor, TaskSpec, Transition,
    TransportHandle, TransportKind,
};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// What happens to snapshots arriving from the executor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnapshotPolicy {
    /// Apply to the workspace as soon as they verify.
    Auto,
    /// Queue for explicit approval or discard.
    Staged,
    /// Ignore entirely.
    Discard,
}

impl SnapshotPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            SnapshotPolicy::Auto => "auto",
            SnapshotPolicy::Staged => "staged",
            SnapshotPolicy::Discard => "discard",
        }
    }
}

impl std::str::FromStr for SnapshotPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(SnapshotPolicy::Auto),
            "staged" => Ok(SnapshotPolicy::Staged),
            "discard" => Ok(SnapshotPolicy::Discard),
            other => Err(format!("unknown snapshot policy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DelegationRecord {
    pub delegation_id: String,
    pub state: DelegationState,
    pub task: TaskSpec,
    pub proposed_lease: LeaseConfig,
    pub effective_lease: Option<LeaseConfig>,
    pub active_lease: Option<ActiveLease>,
    pub env: EnvironmentDeclaration,
    pub workspace_root: PathBuf,
    pub transport_kind: TransportKind,
    pub executor_endpoint: String,
    pub executor_work_dir: Option<String>,
    pub snapshot_policy: SnapshotPolicy,
    /// True once the transport reported continuous synchronization; forces
    /// the effective snapshot policy to auto.
    #[serde(default)]
    pub live_sync: bool,
    #[serde(default)]
    pub pending_snapshots: Vec<SnapshotDescriptor>,
    /// Snapshot ids already reconciled into the workspace. Replayed events
    /// after a reconnect or recovery consult this before touching disk.
    #[serde(default)]
    pub applied_snapshot_ids: Vec<String>,
    pub history: Vec<Transition<DelegationState, DelegationEvent>>,
    pub final_summary: Option<DonePayload>,
    pub last_error: Option<ProtocolError>,
    pub transport_handle: Option<TransportHandle>,
    /// Highest SSE event id consumed; reconnects resume after it.
    #[serde(default)]
    pub last_event_id: u64,
    pub invited_at: Option<DateTime<Utc>>,
    pub created_at: DateTime<Utc>,
}

impl DelegationRecord {
    pub fn new(
        delegation_id: String,
        task: TaskSpec,
        proposed_lease: LeaseConfig,
        env: EnvironmentDeclaration,
        workspace_root: PathBuf,
        transport_kind: TransportKind,
        executor_endpoint: String,
        snapshot_policy: SnapshotPolicy,
    ) -> Self {
        DelegationRecord {
            delegation_id,
            state: DelegationState::Created,
            task,
            proposed_lease,
            effective_lease: None,
            active_lease: None,
            env,
            workspace_root,
            transport_kind,
            executor_endpoint,
            executor_work_dir: None,
            snapshot_policy,
            live_sync: false,
            pending_snapshots: Vec::new(),
            applied_snapshot_ids: Vec::new(),
            history: Vec::new(),
            final_summary: None,
            last_error: None,
            transport_handle: None,
            last_event_id: 0,
            invited_at: None,
            created_at: Utc::now(),
        }
    }

    /// Rebuild the lifecycle machine from history, verifying replay
    /// soundness and that the stored `state` matches the fold.
    pub fn rebuild_machine(&self) -> Result<DelegationStateMachine, ProtocolError> {
        let machine = DelegationStateMachine::replay(&self.history)?;
        if machine.state() != self.state {
            return Err(ProtocolError::new(
                awcp_core::ErrorCode::InvalidState,
                format!(
                    "stored state {} does not match history fold {}",
                    self.state,
                    machine.state()
                ),
            ));
        }
        Ok(machine)
    }

    pub fn is_terminal(&self) -> bool {
        self.state.is_terminal()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use awcp_core::LeaseMode;

    fn record() -> DelegationRecord {
        DelegationRecord::new(
            "d-1".into(),
            TaskSpec { description: "sort files".into(), agent_prompt: "sort".into() },
            LeaseConfig { ttl_seconds: 600, mode: LeaseMode::ReadWrite },
            EnvironmentDeclaration::everything(),
            PathBuf::from("/tmp/ws"),
            TransportKind::Archive,
            "http://127.0.0.1:1".into(),
            SnapshotPolicy::Auto,
        )
    }

    #[test]
    fn machine_rebuild_checks_state_against_history() {
        let mut rec = record();
        let mut machine = DelegationStateMachine::new();
        machine.apply(DelegationEvent::SendInvite, Utc::now()).unwrap();
        rec.history = machine.history().to_vec();
        rec.state = DelegationState::Invited;
        rec.rebuild_machine().unwrap();

        rec.state = DelegationState::Running;
        let err = rec.rebuild_machine().unwrap_err();
        assert_eq!(err.code, awcp_core::ErrorCode::InvalidState);
    }

    #[test]
    fn policy_parses_its_own_names() {
        for policy in [SnapshotPolicy::Auto, SnapshotPolicy::Staged, SnapshotPolicy::Discard] {
            assert_eq!(policy.as_str().parse::<SnapshotPolicy>().unwrap(), policy);
        }
        assert!("sometimes".parse::<SnapshotPolicy>().is_err());
    }
}
