//! The five control messages and the payload types they carry.

use crate::error::ProtocolError;
use crate::handle::{TransportHandle, TransportKind};
use crate::version::PROTOCOL_VERSION;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

/// Degree of mutation the executor may perform on the projected workspace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LeaseMode {
    ReadOnly,
    ReadWrite,
}

impl LeaseMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LeaseMode::ReadOnly => "read-only",
            LeaseMode::ReadWrite => "read-write",
        }
    }
}

impl std::fmt::Display for LeaseMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LeaseMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "read-only" | "ro" => Ok(LeaseMode::ReadOnly),
            "read-write" | "rw" => Ok(LeaseMode::ReadWrite),
            other => Err(format!("unknown lease mode `{other}`")),
        }
    }
}

/// What the executor is being asked to do.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TaskSpec {
    /// One-line human description, shown in listings and logs.
    pub description: String,
    /// Prompt handed verbatim to the executor's backend agent.
    pub agent_prompt: String,
}

/// Lease terms as proposed in INVITE: a duration, not yet anchored to a
/// clock. Activation happens at START.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LeaseConfig {
    pub ttl_seconds: u64,
    pub mode: LeaseMode,
}

/// An activated lease: absolute UTC expiry plus the granted mode. Both
/// sides enforce it with their own clocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ActiveLease {
    pub expires_at: DateTime<Utc>,
    pub mode: LeaseMode,
}

/// Which files travel: `resources` selects, `excludes` prunes. Glob
/// patterns over workspace-relative paths, `**` included.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EnvironmentDeclaration {
    pub resources: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excludes: Vec<String>,
}

impl EnvironmentDeclaration {
    /// Project everything under the workspace root.
    pub fn everything() -> Self {
        EnvironmentDeclaration { resources: vec!["**".into()], excludes: vec![] }
    }
}

/// Executor-imposed ceiling on lease terms, carried in ACCEPT. START must
/// stay inside it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExecutorConstraints {
    pub max_ttl_seconds: u64,
    pub allowed_modes: Vec<LeaseMode>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InvitePayload {
    pub task: TaskSpec,
    pub lease: LeaseConfig,
    pub environment: EnvironmentDeclaration,
    /// Delegator-fixed transport choice; the executor declines rather than
    /// counter-proposes.
    pub transport_kind: TransportKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AcceptPayload {
    /// Absolute executor-side path the workspace will be materialized at.
    pub work_dir: String,
    pub constraints: ExecutorConstraints,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StartPayload {
    pub lease: ActiveLease,
    pub transport: TransportHandle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DonePayload {
    pub final_summary: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub highlights: Vec<String>,
}

/// Per-type message payload. The `type` tag rides alongside the flattened
/// payload fields on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Payload {
    #[serde(rename = "INVITE")]
    Invite(InvitePayload),
    #[serde(rename = "ACCEPT")]
    Accept(AcceptPayload),
    #[serde(rename = "START")]
    Start(StartPayload),
    #[serde(rename = "DONE")]
    Done(DonePayload),
    #[serde(rename = "ERROR")]
    Error(ProtocolError),
}

/// Discriminant of [`Payload`], handy for dispatch and logging.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageType {
    Invite,
    Accept,
    Start,
    Done,
    Error,
}

impl MessageType {
    pub const ALL: [MessageType; 5] = [
        MessageType::Invite,
        MessageType::Accept,
        MessageType::Start,
        MessageType::Done,
        MessageType::Error,
    ];

    pub fn wire_name(&self) -> &'static str {
        match self {
            MessageType::Invite => "INVITE",
            MessageType::Accept => "ACCEPT",
            MessageType::Start => "START",
            MessageType::Done => "DONE",
            MessageType::Error => "ERROR",
        }
    }
}

impl std::fmt::Display for MessageType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.wire_name())
    }
}

/// A complete protocol message: common header plus per-type payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Message {
    pub protocol_version: String,
    pub delegation_id: String,
    #[serde(flatten)]
    pub payload: Payload,
}

impl Message {
    /// Stamp a payload with the current protocol version.
    pub fn new(delegation_id: impl Into<String>, payload: Payload) -> Self {
        Message {
            protocol_version: PROTOCOL_VERSION.to_string(),
            delegation_id: delegation_id.into(),
            payload,
        }
    }

    pub fn message_type(&self) -> MessageType {
        match self.payload {
            Payload::Invite(_) => MessageType::Invite,
            Payload::Accept(_) => MessageType::Accept,
            Payload::Start(_) => MessageType::Start,
            Payload::Done(_) => MessageType::Done,
            Payload::Error(_) => MessageType::Error,
        }
    }

    /// Semantic checks that the type system cannot express. Run on every
    /// message before sending and after decoding.
    pub fn validate(&self) -> Result<(), String> {
        if self.delegation_id.is_empty() {
            return Err("delegationId must not be empty".into());
        }
        match &self.payload {
            Payload::Invite(p) => {
                if p.lease.ttl_seconds == 0 {
                    return Err("lease ttlSeconds must be at least 1".into());
                }
                if p.environment.resources.is_empty() {
                    return Err("environment must declare at least one resource pattern".into());
                }
            }
            Payload::Accept(p) => {
                if p.work_dir.is_empty() {
                    return Err("workDir must not be empty".into());
                }
                if p.constraints.max_ttl_seconds == 0 {
                    return Err("constraints maxTtlSeconds must be at least 1".into());
                }
            }
            Payload::Start(_) | Payload::Done(_) => {}
            Payload::Error(e) => {
                if e.message.is_empty() {
                    return Err("error message must not be empty".into());
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::ErrorCode;

    fn invite() -> Message {
        Message::new(
            "d-1",
            Payload::Invite(InvitePayload {
                task: TaskSpec { description: "desc".into(), agent_prompt: "prompt".into() },
                lease: LeaseConfig { ttl_seconds: 600, mode: LeaseMode::ReadWrite },
                environment: EnvironmentDeclaration::everything(),
                transport_kind: TransportKind::Archive,
            }),
        )
    }

    #[test]
    fn new_stamps_current_version() {
        assert_eq!(invite().protocol_version, PROTOCOL_VERSION);
        assert_eq!(invite().message_type(), MessageType::Invite);
    }

    #[test]
    fn type_tag_and_payload_fields_are_flattened() {
        let value = serde_json::to_value(invite()).unwrap();
        assert_eq!(value["type"], "INVITE");
        assert_eq!(value["delegationId"], "d-1");
        assert_eq!(value["task"]["agentPrompt"], "prompt");
        assert_eq!(value["lease"]["ttlSeconds"], 600);
        assert_eq!(value["transportKind"], "archive");
    }

    #[test]
    fn validation_rejects_degenerate_invites() {
        let mut msg = invite();
        assert!(msg.validate().is_ok());

        if let Payload::Invite(p) = &mut msg.payload {
            p.lease.ttl_seconds = 0;
        }
        assert!(msg.validate().is_err());

        let mut msg = invite();
        if let Payload::Invite(p) = &mut msg.payload {
            p.environment.resources.clear();
        }
        assert!(msg.validate().is_err());

        let mut msg = invite();
        msg.delegation_id.clear();
        assert!(msg.validate().is_err());
    }

    #[test]
    fn error_payload_round_trips_through_value() {
        let msg = Message::new(
            "d-2",
            Payload::Error(
                ProtocolError::new(ErrorCode::Declined, "busy").with_hint("retry later"),
            ),
        );
        let value = serde_json::to_value(&msg).unwrap();
        assert_eq!(value["type"], "ERROR");
        assert_eq!(value["code"], "DECLINED");
        let back: Message = serde_json::from_value(value).unwrap();
        assert_eq!(back, msg);
    }
}
