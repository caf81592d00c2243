//! One mutating process per state directory. Records are persisted by
//! atomic rename, which keeps readers safe, but two writers could still
//! interleave stale record contents; an advisory flock prevents that.

use std::fs::{self, File, OpenOptions};
use std::io;
use std::os::fd::AsRawFd;
use std::path::Path;

#[derive(Debug)]
pub struct StateLock {
    _file: File,
}

impl StateLock {
    /// Take the exclusive lock for `state_dir`, failing fast with
    /// `WouldBlock` when another process holds it. The lock lives as long
    /// as the returned guard.
    pub fn acquire(state_dir: &Path) -> io::Result<StateLock> {
        fs::create_dir_all(state_dir)?;
        let file =
            OpenOptions::new().create(true).write(true).open(state_dir.join("lock"))?;
        let rc = unsafe { libc::flock(file.as_raw_fd(), libc::LOCK_EX | libc::LOCK_NB) };
        if rc != 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(StateLock { _file: file })
    }
}
