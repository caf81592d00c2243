//! The two lifecycle state machines.
//!
//! The delegation machine tracks a workspace projection from the delegator's
//! point of view; the assignment machine is the executor's much smaller
//! mirror of the same collaboration. Both are total over (state, event):
//! every pair either names a fixed successor state or is rejected without
//! mutating anything. Terminal states absorb no events at all.
//!
//! The full transition relation is exported as a machine-readable fixture
//! ([`CONFORMANCE_FIXTURE_JSON`]) so external tooling can check an
//! implementation against the same table this module executes.

use crate::error::{ErrorCode, ProtocolError};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

/// Delegator-side lifecycle states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DelegationState {
    Created,
    Invited,
    Accepted,
    Started,
    Running,
    Completed,
    Error,
    Cancelled,
    Expired,
}

impl DelegationState {
    pub const ALL: [DelegationState; 9] = [
        DelegationState::Created,
        DelegationState::Invited,
        DelegationState::Accepted,
        DelegationState::Started,
        DelegationState::Running,
        DelegationState::Completed,
        DelegationState::Error,
        DelegationState::Cancelled,
        DelegationState::Expired,
    ];

    pub fn is_terminal(&self) -> bool {
        matches!(
            self,
            DelegationState::Completed
                | DelegationState::Error
                | DelegationState::Cancelled
                | DelegationState::Expired
        )
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DelegationState::Created => "created",
            DelegationState::Invited => "invited",
            DelegationState::Accepted => "accepted",
            DelegationState::Started => "started",
            DelegationState::Running => "running",
            DelegationState::Completed => "completed",
            DelegationState::Error => "error",
            DelegationState::Cancelled => "cancelled",
            DelegationState::Expired => "expired",
        }
    }
}

impl std::fmt::Display for DelegationState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Events the delegation machine reacts to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DelegationEvent {
    SendInvite,
    RecvAccept,
    SendStart,
    /// Executor reported the workspace materialized and the backend spawned.
    SetupComplete,
    RecvDone,
    /// A snapshot arrived mid-run. Self-loop on `running`, recorded in the
    /// history so audits can count arrivals.
    SnapshotReceived,
    Error,
    Cancel,
    /// Lease or invitation deadline ran out.
    Expire,
}

impl DelegationEvent {
    pub const ALL: [DelegationEvent; 9] = [
        DelegationEvent::SendInvite,
        DelegationEvent::RecvAccept,
        DelegationEvent::SendStart,
        DelegationEvent::SetupComplete,
        DelegationEvent::RecvDone,
        DelegationEvent::SnapshotReceived,
        DelegationEvent::Error,
        DelegationEvent::Cancel,
        DelegationEvent::Expire,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DelegationEvent::SendInvite => "SEND_INVITE",
            DelegationEvent::RecvAccept => "RECV_ACCEPT",
            DelegationEvent::SendStart => "SEND_START",
            DelegationEvent::SetupComplete => "SETUP_COMPLETE",
            DelegationEvent::RecvDone => "RECV_DONE",
            DelegationEvent::SnapshotReceived => "SNAPSHOT_RECEIVED",
            DelegationEvent::Error => "ERROR",
            DelegationEvent::Cancel => "CANCEL",
            DelegationEvent::Expire => "EXPIRE",
        }
    }
}

impl std::fmt::Display for DelegationEvent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The delegation transition relation. `None` means the pair is illegal.
pub fn delegation_transition(
    state: DelegationState,
    event: DelegationEvent,
) -> Option<DelegationState> {
    use DelegationEvent as E;
    use DelegationState as S;
    match (state, event) {
        (S::Created, E::SendInvite) => Some(S::Invited),
        (S::Invited, E::RecvAccept) => Some(S::Accepted),
        (S::Accepted, E::SendStart) => Some(S::Started),
        (S::Started, E::SetupComplete) => Some(S::Running),
        (S::Running, E::SnapshotReceived) => Some(S::Running),
        (S::Running, E::RecvDone) => Some(S::Completed),
        (s, E::Error) if !s.is_terminal() => Some(S::Error),
        (s, E::Cancel) if !s.is_terminal() => Some(S::Cancelled),
        (S::Invited | S::Accepted | S::Running, E::Expire) => Some(S::Expired),
        _ => None,
    }
}

/// Events legal in `state`, in declaration order.
pub fn delegation_legal_events(state: DelegationState) -> Vec<DelegationEvent> {
    DelegationEvent::ALL
        .into_iter()
        .filter(|e| delegation_transition(state, *e).is_some())
        .collect()
}

/// Executor-side lifecycle states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssignmentState {
    Pending,
    Active,
    Completed,
    Error,
}

impl AssignmentState {
    pub const ALL: [AssignmentState; 4] = [
        AssignmentState::Pending,
        AssignmentState::Active,
        AssignmentState::Completed,
        AssignmentState::Error,
    ];

    pub fn is_terminal(&self) -> bool {
        matches!(self, AssignmentState::Completed | AssignmentState::Error)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AssignmentState::Pending => "pending",
            AssignmentState::Active => "active",
            AssignmentState::Completed => "completed",
            AssignmentState::Error => "error",
        }
    }
}

impl std::fmt::Display for AssignmentState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Events the assignment machine reacts to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AssignmentEvent {
    RecvStart,
    TaskComplete,
    Error,
    Cancel,
}

impl AssignmentEvent {
    pub const ALL: [AssignmentEvent; 4] = [
        AssignmentEvent::RecvStart,
        AssignmentEvent::TaskComplete,
        AssignmentEvent::Error,
        AssignmentEvent::Cancel,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AssignmentEvent::RecvStart => "RECV_START",
            AssignmentEvent::TaskComplete => "TASK_COMPLETE",
            AssignmentEvent::Error => "ERROR",
            AssignmentEvent::Cancel => "CANCEL",
        }
    }
}

impl std::fmt::Display for AssignmentEvent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The assignment transition relation. Cancellation lands in `error`: the
/// executor records only that the assignment did not finish, the richer
/// disposition lives on the delegator side.
pub fn assignment_transition(
    state: AssignmentState,
    event: AssignmentEvent,
) -> Option<AssignmentState> {
    use AssignmentEvent as E;
    use AssignmentState as S;
    match (state, event) {
        (S::Pending, E::RecvStart) => Some(S::Active),
        (S::Active, E::TaskComplete) => Some(S::Completed),
        (s, E::Error | E::Cancel) if !s.is_terminal() => Some(S::Error),
        _ => None,
    }
}

pub fn assignment_legal_events(state: AssignmentState) -> Vec<AssignmentEvent> {
    AssignmentEvent::ALL
        .into_iter()
        .filter(|e| assignment_transition(state, *e).is_some())
        .collect()
}

/// One applied transition, as stored in persistent history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Transition<S, E> {
    pub from: S,
    pub event: E,
    pub to: S,
    pub at: DateTime<Utc>,
}

macro_rules! state_machine {
    ($(#[$doc:meta])* $name:ident, $state:ident, $event:ident, $initial:expr, $transition:path) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
        #[serde(rename_all = "camelCase")]
        pub struct $name {
            state: $state,
            history: Vec<Transition<$state, $event>>,
        }

        impl Default for $name {
            fn default() -> Self {
                Self::new()
            }
        }

        impl $name {
            pub fn new() -> Self {
                Self { state: $initial, history: Vec::new() }
            }

            pub fn state(&self) -> $state {
                self.state
            }

            pub fn history(&self) -> &[Transition<$state, $event>] {
                &self.history
            }

            pub fn can_apply(&self, event: $event) -> bool {
                $transition(self.state, event).is_some()
            }

            /// Apply `event` or reject it without side effects.
            pub fn apply(
                &mut self,
                event: $event,
                at: DateTime<Utc>,
            ) -> Result<$state, ProtocolError> {
                match $transition(self.state, event) {
                    Some(next) => {
                        self.history.push(Transition {
                            from: self.state,
                            event,
                            to: next,
                            at,
                        });
                        self.state = next;
                        Ok(next)
                    }
                    None => Err(ProtocolError::new(
                        ErrorCode::InvalidTransition,
                        format!("event {} is not legal in state {}", event, self.state),
                    )),
                }
            }

            /// Rebuild a machine from persisted history, verifying that every
            /// recorded step matches the transition relation and that the
            /// steps chain. This is the replay-soundness check persistence
            /// relies on.
            pub fn replay(
                history: &[Transition<$state, $event>],
            ) -> Result<Self, ProtocolError> {
                let mut machine = Self::new();
                for step in history {
                    if step.from != machine.state {
                        return Err(ProtocolError::new(
                            ErrorCode::InvalidState,
                            format!(
                                "history does not chain: expected from={}, found {}",
                                machine.state, step.from
                            ),
                        ));
                    }
                    let reached = machine.apply(step.event, step.at).map_err(|e| {
                        ProtocolError::new(
                            ErrorCode::InvalidState,
                            format!("history replays an illegal step: {}", e.message),
                        )
                    })?;
                    if reached != step.to {
                        return Err(ProtocolError::new(
                            ErrorCode::InvalidState,
                            format!(
                                "history disagrees with the transition table: {} -{}-> {} (table says {})",
                                step.from, step.event, step.to, reached
                            ),
                        ));
                    }
                }
                Ok(machine)
            }
        }
    };
}

state_machine!(
    /// Delegation machine with recorded history. Starts in `created`.
    DelegationStateMachine,
    DelegationState,
    DelegationEvent,
    DelegationState::Created,
    delegation_transition
);

state_machine!(
    /// Assignment machine with recorded history. Starts in `pending`.
    AssignmentStateMachine,
    AssignmentState,
    AssignmentEvent,
    AssignmentState::Pending,
    assignment_transition
);

/// Machine-readable dump of both transition relations, for conformance
/// checking outside this crate. Kept in a checked-in fixture file; a test
/// guards the file against drifting from the code.
pub fn conformance_fixture() -> serde_json::Value {
    fn table<S: Copy + Serialize, E: Copy + Serialize>(
        states: &[S],
        events: &[E],
        terminal: impl Fn(S) -> bool,
        transition: impl Fn(S, E) -> Option<S>,
    ) -> serde_json::Value {
        let mut transitions = Vec::new();
        for &s in states {
            for &e in events {
                if let Some(to) = transition(s, e) {
                    transitions.push(serde_json::json!({
                        "from": s, "event": e, "to": to,
                    }));
                }
            }
        }
        serde_json::json!({
            "states": states,
            "events": events,
            "terminal": states.iter().copied().filter(|s| terminal(*s)).collect::<Vec<_>>(),
            "transitions": transitions,
        })
    }

    serde_json::json!({
        "delegation": table(
            &DelegationState::ALL,
            &DelegationEvent::ALL,
            |s: DelegationState| s.is_terminal(),
            delegation_transition,
        ),
        "assignment": table(
            &AssignmentState::ALL,
            &AssignmentEvent::ALL,
            |s: AssignmentState| s.is_terminal(),
            assignment_transition,
        ),
    })
}

/// The checked-in rendering of [`conformance_fixture`].
pub const CONFORMANCE_FIXTURE_JSON: &str = include_str!("../fixtures/lifecycle_conformance.json");

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2026, 3, 1, 0, 0, 0).unwrap()
    }

    #[test]
    fn happy_path_reaches_completed() {
        use DelegationEvent as E;
        let mut m = DelegationStateMachine::new();
        for (event, expected) in [
            (E::SendInvite, DelegationState::Invited),
            (E::RecvAccept, DelegationState::Accepted),
            (E::SendStart, DelegationState::Started),
            (E::SetupComplete, DelegationState::Running),
            (E::SnapshotReceived, DelegationState::Running),
            (E::RecvDone, DelegationState::Completed),
        ] {
            assert_eq!(m.apply(event, t0()).unwrap(), expected);
        }
        assert_eq!(m.history().len(), 6);
        assert!(m.state().is_terminal());
    }

    #[test]
    fn terminal_states_absorb_nothing() {
        for state in DelegationState::ALL.into_iter().filter(DelegationState::is_terminal) {
            for event in DelegationEvent::ALL {
                assert_eq!(delegation_transition(state, event), None, "{state} + {event}");
            }
            assert!(delegation_legal_events(state).is_empty());
        }
        for state in AssignmentState::ALL.into_iter().filter(AssignmentState::is_terminal) {
            for event in AssignmentEvent::ALL {
                assert_eq!(assignment_transition(state, event), None, "{state} + {event}");
            }
        }
    }

    #[test]
    fn expire_is_legal_exactly_from_invited_accepted_running() {
        let legal: Vec<DelegationState> = DelegationState::ALL
            .into_iter()
            .filter(|s| delegation_transition(*s, DelegationEvent::Expire).is_some())
            .collect();
        assert_eq!(
            legal,
            vec![DelegationState::Invited, DelegationState::Accepted, DelegationState::Running]
        );
    }

    #[test]
    fn snapshot_received_only_loops_on_running() {
        for state in DelegationState::ALL {
            let got = delegation_transition(state, DelegationEvent::SnapshotReceived);
            if state == DelegationState::Running {
                assert_eq!(got, Some(DelegationState::Running));
            } else {
                assert_eq!(got, None, "{state}");
            }
        }
    }

    #[test]
    fn legal_pair_counts_are_frozen() {
        let delegation_pairs: usize = DelegationState::ALL
            .into_iter()
            .map(|s| delegation_legal_events(s).len())
            .sum();
        assert_eq!(delegation_pairs, 19);

        let assignment_pairs: usize = AssignmentState::ALL
            .into_iter()
            .map(|s| assignment_legal_events(s).len())
            .sum();
        assert_eq!(assignment_pairs, 6);
    }

    #[test]
    fn rejected_events_do_not_mutate() {
        let mut m = DelegationStateMachine::new();
        let err = m.apply(DelegationEvent::RecvDone, t0()).unwrap_err();
        assert_eq!(err.code, ErrorCode::InvalidTransition);
        assert_eq!(m.state(), DelegationState::Created);
        assert!(m.history().is_empty());
    }

    #[test]
    fn assignment_error_and_cancel_converge_on_error() {
        for event in [AssignmentEvent::Error, AssignmentEvent::Cancel] {
            let mut m = AssignmentStateMachine::new();
            m.apply(AssignmentEvent::RecvStart, t0()).unwrap();
            assert_eq!(m.apply(event, t0()).unwrap(), AssignmentState::Error);
        }
    }

    #[test]
    fn replay_round_trips_and_rejects_tampering() {
        let mut m = DelegationStateMachine::new();
        m.apply(DelegationEvent::SendInvite, t0()).unwrap();
        m.apply(DelegationEvent::RecvAccept, t0()).unwrap();
        m.apply(DelegationEvent::Cancel, t0()).unwrap();

        let replayed = DelegationStateMachine::replay(m.history()).unwrap();
        assert_eq!(replayed, m);

        // Flip a recorded destination: replay must notice.
        let mut tampered = m.history().to_vec();
        tampered[2].to = DelegationState::Completed;
        let err = DelegationStateMachine::replay(&tampered).unwrap_err();
        assert_eq!(err.code, ErrorCode::InvalidState);

        // Break the chain.
        let mut gapped = m.history().to_vec();
        gapped.remove(0);
        assert!(DelegationStateMachine::replay(&gapped).is_err());
    }

    #[test]
    fn fixture_file_matches_the_code() {
        let from_code = conformance_fixture();
        let from_file: serde_json::Value =
            serde_json::from_str(CONFORMANCE_FIXTURE_JSON).expect("fixture file parses");
        assert_eq!(
            from_file, from_code,
            "fixtures/lifecycle_conformance.json is stale; regenerate it from conformance_fixture()"
        );
    }

    #[test]
    fn state_and_event_wire_names() {
        assert_eq!(serde_json::to_value(DelegationState::Running).unwrap(), "running");
        assert_eq!(serde_json::to_value(DelegationEvent::SnapshotReceived).unwrap(), "SNAPSHOT_RECEIVED");
        assert_eq!(serde_json::to_value(AssignmentEvent::RecvStart).unwrap(), "RECV_START");
        for s in DelegationState::ALL {
            assert_eq!(serde_json::to_value(s).unwrap(), s.as_str());
        }
        for e in DelegationEvent::ALL {
            assert_eq!(serde_json::to_value(e).unwrap(), e.as_str());
        }
    }
}
