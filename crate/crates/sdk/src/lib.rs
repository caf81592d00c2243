//! Delegator and executor services for the workspace delegation protocol.
//!
//! The executor side is an HTTP server: it answers INVITE and START, streams
//! status/snapshot/done/error events over SSE, runs a pluggable backend
//! against the provisioned work directory, and tears down in two phases.
//! The delegator side is purely a client: it admits a workspace, drives the
//! message exchange, consumes the event stream, reconciles snapshots per
//! policy, enforces lease expiry, and persists every transition so a crashed
//! process can recover and resume.
//!
//! Both sides wrap the same lifecycle machines from `awcp_core`; nothing in
//! this crate moves a delegation except through them.

pub mod admission;
pub mod backend;
pub mod client;
pub mod delegator;
pub mod events;
pub mod executor;
pub mod persist;
pub mod record;
pub mod routes;
pub mod sse;

pub use admission::AdmissionPolicy;
pub use backend::{Backend, BackendContext, BackendOutcome, CommandBackend, HttpCallbackBackend};
pub use client::{StartReply, WireClient, WireError};
pub use delegator::{
    DelegateRequest, DelegatorConfig, DelegatorService, Progress, ProgressKind, RecoverOutcome,
};
pub use events::{EventHub, EventName, StoredEvent, SNAPSHOT_INLINE_LIMIT};
pub use executor::{ExecutorConfig, ExecutorPolicy, ExecutorService};
pub use record::{DelegationRecord, SnapshotPolicy};
pub use routes::serve_executor;
pub use sse::{encode_frame, SseFrame, SseParser};
