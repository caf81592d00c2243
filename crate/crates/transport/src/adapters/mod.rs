//! The shipped transport adapter pairs.

pub mod archive;
pub mod git;
pub mod loopback;
pub mod storage;

#[cfg(feature = "sshfs")]
pub mod sshfs;
