//! Core protocol types for delegating a filesystem workspace from one agent
//! node to another under a time-boxed lease.
//!
//! This crate is deliberately free of I/O. It defines the five control
//! messages and their canonical JSON encoding, lease negotiation and expiry
//! arithmetic, the transport handle and snapshot descriptor types that ride
//! inside those messages, and the two lifecycle state machines (delegation on
//! the delegator side, assignment on the executor side). Services, transports,
//! and tooling all build on top of it.

pub mod codec;
pub mod error;
pub mod handle;
pub mod lease;
pub mod lifecycle;
pub mod message;
pub mod version;

pub use codec::{canonical_json, decode_message, encode_message, DecodeError};
pub use error::{ErrorCode, ProtocolError};
pub use handle::{
    capabilities_for, SnapshotData, SnapshotDescriptor, TransportCapabilities, TransportHandle,
    TransportKind,
};
pub use lease::{activate_lease, is_expired, negotiate_lease, remaining_seconds};
pub use lifecycle::{
    AssignmentEvent, AssignmentState, AssignmentStateMachine, DelegationEvent, DelegationState,
    DelegationStateMachine, Transition,
};
pub use message::{
    AcceptPayload, ActiveLease, DonePayload, EnvironmentDeclaration, ExecutorConstraints,
    InvitePayload, LeaseConfig, LeaseMode, Message, MessageType, Payload, StartPayload, TaskSpec,
};
pub use version::{is_compatible, parse_version, PROTOCOL_VERSION};
