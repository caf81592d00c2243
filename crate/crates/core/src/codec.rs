//! Canonical JSON encoding and strict decoding of protocol messages.
//!
//! Encoding is canonical: object keys are emitted in byte-wise sorted order
//! with no insignificant whitespace, so equal messages always serialize to
//! identical bytes. Integrity digests and golden fixtures depend on that.
//! The writer sorts keys itself instead of trusting the `serde_json` map
//! ordering, which flips to insertion order if any crate in the build turns
//! on the `preserve_order` feature.

use crate::message::Message;
use crate::version::is_compatible;
use serde_json::Value;

const KNOWN_TYPES: [&str; 5] = ["INVITE", "ACCEPT", "START", "DONE", "ERROR"];

/// Why an incoming byte string was rejected. Split by failure class so
/// receivers can answer with a precise error instead of a generic parse
/// complaint.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("message must be a JSON object")]
    NotAnObject,
    #[error("missing required field `{0}`")]
    MissingField(&'static str),
    #[error("incompatible protocol version `{0}`")]
    IncompatibleVersion(String),
    #[error("unknown message type `{0}`")]
    UnknownType(String),
    #[error("invalid {message_type} payload: {detail}")]
    InvalidPayload { message_type: String, detail: String },
}

impl DecodeError {
    /// The ERROR payload a receiver sends back for an undecodable message.
    pub fn to_protocol_error(&self) -> crate::error::ProtocolError {
        crate::error::ProtocolError::new(
            crate::error::ErrorCode::MalformedMessage,
            self.to_string(),
        )
    }
}

/// Serialize a message to its canonical byte form.
pub fn encode_message(msg: &Message) -> String {
    let value = serde_json::to_value(msg).expect("protocol messages are plain data");
    canonical_json(&value)
}

/// Parse and validate an incoming message.
///
/// Checks run in a fixed order (JSON shape, version, type tag, payload), so
/// a garbled message from an incompatible peer reports the version mismatch
/// rather than whatever field happens to be missing.
pub fn decode_message(text: &str) -> Result<Message, DecodeError> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| DecodeError::MalformedJson(e.to_string()))?;
    let obj = value.as_object().ok_or(DecodeError::NotAnObject)?;

    let version = obj
        .get("protocolVersion")
        .and_then(Value::as_str)
        .ok_or(DecodeError::MissingField("protocolVersion"))?;
    if !is_compatible(version) {
        return Err(DecodeError::IncompatibleVersion(version.to_string()));
    }

    let msg_type = obj
        .get("type")
        .and_then(Value::as_str)
        .ok_or(DecodeError::MissingField("type"))?;
    if !KNOWN_TYPES.contains(&msg_type) {
        return Err(DecodeError::UnknownType(msg_type.to_string()));
    }

    if !obj.contains_key("delegationId") {
        return Err(DecodeError::MissingField("delegationId"));
    }

    let msg_type = msg_type.to_string();
    serde_json::from_value(value)
        .map_err(|e| DecodeError::InvalidPayload { message_type: msg_type, detail: e.to_string() })
}

/// Render any JSON value with sorted object keys and compact separators.
pub fn canonical_json(value: &Value) -> String {
    let mut out = String::new();
    write_canonical(value, &mut out);
    out
}

fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort_unstable();
            out.push('{');
            for (i, key) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(key).expect("strings serialize"));
                out.push(':');
                write_canonical(&map[key.as_str()], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        // Null, Bool, Number, String: Display for Value is already compact
        // and handles string escaping.
        leaf => out.push_str(&leaf.to_string()),
    }
}
