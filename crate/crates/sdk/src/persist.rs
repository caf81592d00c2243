//! Atomic JSON persistence for delegation records, one document per
//! delegation under `<stateDir>/delegations/`. Writes go through a temp
//! file and rename so a crash never leaves a half-written record.

use crate::record::DelegationRecord;
use awcp_core::{ErrorCode, ProtocolError};
use std::fs;
use std::path::{Path, PathBuf};

pub fn delegations_dir(state_dir: &Path) -> PathBuf {
    state_dir.join("delegations")
}

pub fn record_path(state_dir: &Path, delegation_id: &str) -> PathBuf {
    delegations_dir(state_dir).join(format!("{delegation_id}.json"))
}

fn internal(context: &str, err: impl std::fmt::Display) -> ProtocolError {
    ProtocolError::new(ErrorCode::Internal, format!("{context}: {err}"))
}

/// Persist one record. The record's replay-soundness invariant is verified
/// first; a record whose state disagrees with its history never reaches
/// disk.
pub fn persist_record(state_dir: &Path, record: &DelegationRecord) -> Result<(), ProtocolError> {
    record.rebuild_machine()?;
    let dir = delegations_dir(state_dir);
    fs::create_dir_all(&dir).map_err(|e| internal("create state dir", e))?;
    let body = serde_json::to_vec_pretty(record).map_err(|e| internal("encode record", e))?;
    let target = record_path(state_dir, &record.delegation_id);
    let temp = dir.join(format!(".{}.tmp", record.delegation_id));
    fs::write(&temp, &body).map_err(|e| internal("write record", e))?;
    fs::rename(&temp, &target).map_err(|e| internal("commit record", e))?;
    Ok(())
}

/// One recovered file: the record, or why it could not be loaded.
pub type LoadResult = (PathBuf, Result<DelegationRecord, ProtocolError>);

/// Load every persisted record. Corrupt files are reported individually and
/// never prevent healthy records from loading.
pub fn load_records(state_dir: &Path) -> Vec<LoadResult> {
    let dir = delegations_dir(state_dir);
    let entries = match fs::read_dir(&dir) {
        Ok(e) => e,
        Err(_) => return Vec::new(),
    };
    let mut results = Vec::new();
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    for path in paths {
        let outcome = fs::read_to_string(&path)
            .map_err(|e| ProtocolError::new(ErrorCode::InvalidState, format!("read: {e}")))
            .and_then(|text| {
                serde_json::from_str::<DelegationRecord>(&text).map_err(|e| {
                    ProtocolError::new(ErrorCode::InvalidState, format!("parse: {e}"))
                })
            })
            .and_then(|record| record.rebuild_machine().map(|_| record));
        results.push((path, outcome));
    }
    results
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::SnapshotPolicy;
    use awcp_core::{
        DelegationEvent, DelegationState, DelegationStateMachine, EnvironmentDeclaration,
        LeaseConfig, LeaseMode, TaskSpec, TransportKind,
    };
    use chrono::Utc;

    fn record(id: &str) -> DelegationRecord {
        let mut rec = DelegationRecord::new(
            id.into(),
            TaskSpec { description: "t".into(), agent_prompt: "p".into() },
            LeaseConfig { ttl_seconds: 60, mode: LeaseMode::ReadWrite },
            EnvironmentDeclaration::everything(),
            "/tmp/ws".into(),
            TransportKind::Archive,
            "http://127.0.0.1:1".into(),
            SnapshotPolicy::Auto,
        );
        let mut machine = DelegationStateMachine::new();
        machine.apply(DelegationEvent::SendInvite, Utc::now()).unwrap();
        rec.history = machine.history().to_vec();
        rec.state = DelegationState::Invited;
        rec
    }

    #[test]
    fn persist_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let rec = record("d-1");
        persist_record(dir.path(), &rec).unwrap();

        let loaded = load_records(dir.path());
        assert_eq!(loaded.len(), 1);
        let got = loaded[0].1.as_ref().unwrap();
        assert_eq!(serde_json::to_value(got).unwrap(), serde_json::to_value(&rec).unwrap());
    }

    #[test]
    fn inconsistent_records_never_reach_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = record("d-2");
        rec.state = DelegationState::Running;
        let err = persist_record(dir.path(), &rec).unwrap_err();
        assert_eq!(err.code, awcp_core::ErrorCode::InvalidState);
        assert!(!record_path(dir.path(), "d-2").exists());
    }

    #[test]
    fn one_corrupt_file_does_not_poison_the_rest() {
        let dir = tempfile::tempdir().unwrap();
        persist_record(dir.path(), &record("d-1")).unwrap();
        persist_record(dir.path(), &record("d-3")).unwrap();
        std::fs::write(record_path(dir.path(), "d-2"), "{not json").unwrap();

        let loaded = load_records(dir.path());
        assert_eq!(loaded.len(), 3);
        let ok = loaded.iter().filter(|(_, r)| r.is_ok()).count();
        let bad: Vec<_> = loaded.iter().filter(|(_, r)| r.is_err()).collect();
        assert_eq!(ok, 2);
        assert_eq!(bad.len(), 1);
        assert!(bad[0].0.ends_with("d-2.json"));
        assert_eq!(bad[0].1.as_ref().unwrap_err().code, awcp_core::ErrorCode::InvalidState);
    }

    #[test]
    fn overwrite_is_atomic_rename() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = record("d-1");
        persist_record(dir.path(), &rec).unwrap();
        rec.last_event_id = 9;
        persist_record(dir.path(), &rec).unwrap();

        let loaded = load_records(dir.path());
        assert_eq!(loaded.len(), 1, "temp files must not linger");
        assert_eq!(loaded[0].1.as_ref().unwrap().last_event_id, 9);
    }
}
