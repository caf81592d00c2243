//! Machine-readable failure codes and the ERROR message payload.

use serde::{Deserialize, Serialize};

/// Closed set of failure codes that travel on the wire.
///
/// Codes are coarse on purpose: they drive peer behaviour (retry, abort,
/// surface to operator), while the free-form `message`/`hint` carry detail
/// for humans. Unknown codes fail decoding rather than round-tripping
/// silently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    /// Executor refused the invitation (transport, budget, or policy).
    Declined,
    /// A delegation with this id already exists on the receiving side.
    Duplicate,
    /// Message referenced a delegation the receiver has never seen.
    UnknownDelegation,
    /// Request body failed to decode as a protocol message.
    MalformedMessage,
    /// The active lease ran out before the work finished.
    LeaseExpired,
    /// START terms exceed what ACCEPT constrained the lease to.
    LeaseViolation,
    /// Transferred bytes did not match their integrity digest.
    IntegrityMismatch,
    /// An event arrived that the lifecycle state machine rejects.
    InvalidTransition,
    /// Workspace projection was blocked by local admission policy.
    AdmissionDenied,
    /// Transport prerequisites are missing or the channel failed.
    TransportUnavailable,
    /// The delegator withdrew the delegation.
    Cancelled,
    /// Persisted or in-memory state is internally inconsistent.
    InvalidState,
    /// The executor's backend agent failed to produce a result.
    BackendFailed,
    /// Unclassified internal failure.
    Internal,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 14] = [
        ErrorCode::Declined,
        ErrorCode::Duplicate,
        ErrorCode::UnknownDelegation,
        ErrorCode::MalformedMessage,
        ErrorCode::LeaseExpired,
        ErrorCode::LeaseViolation,
        ErrorCode::IntegrityMismatch,
        ErrorCode::InvalidTransition,
        ErrorCode::AdmissionDenied,
        ErrorCode::TransportUnavailable,
        ErrorCode::Cancelled,
        ErrorCode::InvalidState,
        ErrorCode::BackendFailed,
        ErrorCode::Internal,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorCode::Declined => "DECLINED",
            ErrorCode::Duplicate => "DUPLICATE",
            ErrorCode::UnknownDelegation => "UNKNOWN_DELEGATION",
            ErrorCode::MalformedMessage => "MALFORMED_MESSAGE",
            ErrorCode::LeaseExpired => "LEASE_EXPIRED",
            ErrorCode::LeaseViolation => "LEASE_VIOLATION",
            ErrorCode::IntegrityMismatch => "INTEGRITY_MISMATCH",
            ErrorCode::InvalidTransition => "INVALID_TRANSITION",
            ErrorCode::AdmissionDenied => "ADMISSION_DENIED",
            ErrorCode::TransportUnavailable => "TRANSPORT_UNAVAILABLE",
            ErrorCode::Cancelled => "CANCELLED",
            ErrorCode::InvalidState => "INVALID_STATE",
            ErrorCode::BackendFailed => "BACKEND_FAILED",
            ErrorCode::Internal => "INTERNAL",
        }
    }
}

impl std::fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Payload of an ERROR message; doubles as the error type most service
/// operations return, so failures can be forwarded to the peer verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(rename_all = "camelCase")]
#[error("{code}: {message}")]
pub struct ProtocolError {
    pub code: ErrorCode,
    pub message: String,
    /// Optional remediation for the operator, e.g. which policy knob to relax.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hint: Option<String>,
}

impl ProtocolError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ProtocolError { code, message: message.into(), hint: None }
    }

    pub fn with_hint(mut self, hint: impl Into<String>) -> Self {
        self.hint = Some(hint.into());
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_names_match_serde_encoding() {
        for code in ErrorCode::ALL {
            let encoded = serde_json::to_value(code).unwrap();
            assert_eq!(encoded, serde_json::Value::String(code.as_str().to_string()));
        }
    }

    #[test]
    fn unknown_codes_fail_decoding() {
        assert!(serde_json::from_str::<ErrorCode>("\"EACCES\"").is_err());
        assert!(serde_json::from_str::<ErrorCode>("\"declined\"").is_err());
    }

    #[test]
    fn hint_is_omitted_when_absent() {
        let err = ProtocolError::new(ErrorCode::Declined, "no capacity");
        let json = serde_json::to_string(&err).unwrap();
        assert!(!json.contains("hint"));

        let err = err.with_hint("raise maxConcurrentAssignments");
        let json = serde_json::to_string(&err).unwrap();
        assert!(json.contains("raise maxConcurrentAssignments"));
    }
}
