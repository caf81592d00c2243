//! Transport failure taxonomy and its mapping onto wire error codes.

use awcp_core::{ErrorCode, ProtocolError};
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    /// Bytes or commits did not match their declared integrity reference.
    #[error("integrity mismatch: {0}")]
    IntegrityMismatch(String),

    /// Prerequisites missing, channel broken, or operation unsupported by
    /// this transport kind.
    #[error("transport unavailable: {0}")]
    Unavailable(String),

    /// Release was requested while the data channel is still attached.
    #[error("cleanup order violation: release requested before detach")]
    ReleaseBeforeDetach,

    #[error("invalid glob pattern `{pattern}`: {source}")]
    InvalidPattern {
        pattern: String,
        #[source]
        source: globset::Error,
    },

    /// A symlink points outside the workspace root and policy says no.
    #[error("symlink `{0}` escapes the workspace root")]
    SymlinkEscapes(PathBuf),

    #[error("path `{0}` is not valid UTF-8")]
    NonUtf8Path(PathBuf),

    /// Archive entry would land outside the extraction root.
    #[error("archive entry `{0}` is unsafe to extract")]
    UnsafeArchivePath(String),

    #[error("archive of {actual} bytes exceeds the {cap} byte cap for this transport")]
    ArchiveTooLarge { actual: u64, cap: u64 },

    /// Handle kind and adapter kind disagree; indicates a wiring bug or a
    /// tampered START.
    #[error("handle kind `{handle}` does not match adapter kind `{adapter}`")]
    HandleMismatch { handle: String, adapter: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("zip: {0}")]
    Zip(#[from] zip::result::ZipError),

    #[error("http: {0}")]
    Http(#[from] reqwest::Error),

    #[error("blob store refused the request: {0}")]
    BlobStore(String),

    #[error("`{command}` failed: {detail}")]
    Command { command: String, detail: String },
}

impl TransportError {
    pub(crate) fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| TransportError::Io { context, source }
    }

    /// Collapse onto the closed wire code set. Anything the peer can act on
    /// keeps its specific code; the rest is a transport availability
    /// problem from the protocol's point of view.
    pub fn code(&self) -> ErrorCode {
        match self {
            TransportError::IntegrityMismatch(_) => ErrorCode::IntegrityMismatch,
            TransportError::SymlinkEscapes(_) => ErrorCode::AdmissionDenied,
            TransportError::ReleaseBeforeDetach => ErrorCode::InvalidState,
            TransportError::Unavailable(_)
            | TransportError::Http(_)
            | TransportError::BlobStore(_)
            | TransportError::Command { .. }
            | TransportError::ArchiveTooLarge { .. } => ErrorCode::TransportUnavailable,
            TransportError::InvalidPattern { .. }
            | TransportError::NonUtf8Path(_)
            | TransportError::UnsafeArchivePath(_)
            | TransportError::HandleMismatch { .. }
            | TransportError::Io { .. }
            | TransportError::Zip(_) => ErrorCode::Internal,
        }
    }
}

impl From<TransportError> for ProtocolError {
    fn from(err: TransportError) -> Self {
        ProtocolError::new(err.code(), err.to_string())
    }
}
