//! Global invariant checks applied to every run, faulted or not: each
//! observed transition must appear in the published conformance tables, both
//! sides must end in compatible terminal states, and every namespaced
//! resource (work dirs, scratch, remote branches, parked blobs) must be
//! reclaimed.

use std::collections::HashSet;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Duration;

use awcp_core::lifecycle::{
    AssignmentEvent, AssignmentState, DelegationEvent, DelegationState, Transition,
};
use serde::Serialize;

use crate::world::World;

type Triple = (String, String, String);

/// Allowed transitions for both machines, loaded once from the conformance
/// fixture shipped inside the core crate.
pub struct FixtureTables {
    pub delegation: HashSet<Triple>,
    pub assignment: HashSet<Triple>,
    pub delegation_terminal: HashSet<String>,
    pub assignment_terminal: HashSet<String>,
}

pub fn fixture_tables() -> &'static FixtureTables {
    static TABLES: OnceLock<FixtureTables> = OnceLock::new();
    TABLES.get_or_init(|| {
        let fixture: serde_json::Value =
            serde_json::from_str(awcp_core::lifecycle::CONFORMANCE_FIXTURE_JSON)
                .expect("checked-in conformance fixture parses");
        FixtureTables {
            delegation: transition_set(&fixture["delegation"]),
            assignment: transition_set(&fixture["assignment"]),
            delegation_terminal: string_set(&fixture["delegation"]["terminal"]),
            assignment_terminal: string_set(&fixture["assignment"]["terminal"]),
        }
    })
}

fn transition_set(machine: &serde_json::Value) -> HashSet<Triple> {
    machine["transitions"]
        .as_array()
        .expect("fixture lists transitions")
        .iter()
        .map(|t| {
            (
                t["from"].as_str().unwrap().to_string(),
                t["event"].as_str().unwrap().to_string(),
                t["to"].as_str().unwrap().to_string(),
            )
        })
        .collect()
}

fn string_set(value: &serde_json::Value) -> HashSet<String> {
    value
        .as_array()
        .expect("fixture lists terminal states")
        .iter()
        .map(|s| s.as_str().unwrap().to_string())
        .collect()
}

/// What one run's histories looked like, reduced to name triples so they can
/// be checked against the fixture and compared across replays.
#[derive(Debug, Clone, Serialize)]
pub struct TransitionLog {
    pub delegation: Vec<Triple>,
    pub assignment: Vec<Triple>,
    pub delegator_terminal: Option<String>,
    pub executor_terminal: Option<String>,
}

impl TransitionLog {
    pub fn new(
        delegation_history: &[Transition<DelegationState, DelegationEvent>],
        assignment_history: Option<&[Transition<AssignmentState, AssignmentEvent>]>,
        delegator_state: Option<DelegationState>,
        executor_state: Option<AssignmentState>,
    ) -> Self {
        TransitionLog {
            delegation: delegation_history
                .iter()
                .map(|t| {
                    (t.from.to_string(), t.event.to_string(), t.to.to_string())
                })
                .collect(),
            assignment: assignment_history
                .unwrap_or(&[])
                .iter()
                .map(|t| {
                    (t.from.to_string(), t.event.to_string(), t.to.to_string())
                })
                .collect(),
            delegator_terminal: delegator_state.map(|s| s.to_string()),
            executor_terminal: executor_state.map(|s| s.to_string()),
        }
    }

    /// The delegation triples with consecutive duplicates collapsed. Crash
    /// recovery replays the event stream, so a snapshot self-loop can appear
    /// twice; the collapsed form is what replays must agree on.
    pub fn canonical_delegation(&self) -> Vec<Triple> {
        let mut out: Vec<Triple> = Vec::new();
        for triple in &self.delegation {
            if out.last() != Some(triple) {
                out.push(triple.clone());
            }
        }
        out
    }
}

/// Leftover resources found after a run. Empty lists mean everything was
/// reclaimed.
#[derive(Debug, Clone, Default, Serialize)]
pub struct FsAudit {
    pub leftover_work_dirs: Vec<String>,
    pub leftover_scratch: Vec<String>,
    pub leftover_branches: Vec<String>,
    pub leftover_blobs: Vec<String>,
}

impl FsAudit {
    pub fn is_clean(&self) -> bool {
        self.leftover_work_dirs.is_empty()
            && self.leftover_scratch.is_empty()
            && self.leftover_branches.is_empty()
            && self.leftover_blobs.is_empty()
    }
}

fn list_dir_names(path: &Path) -> Vec<String> {
    let Ok(entries) = std::fs::read_dir(path) else { return Vec::new() };
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

async fn list_remote_branches(remote: &Path) -> Vec<String> {
    let output = tokio::process::Command::new("git")
        .arg("--git-dir")
        .arg(remote)
        .args(["for-each-ref", "--format=%(refname:short)", "refs/heads"])
        .output()
        .await;
    match output {
        Ok(out) if out.status.success() => String::from_utf8_lossy(&out.stdout)
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect(),
        _ => vec!["<git for-each-ref failed>".into()],
    }
}

async fn gather(world: &World) -> FsAudit {
    let mut audit = FsAudit {
        leftover_work_dirs: list_dir_names(&world.work_base),
        leftover_scratch: list_dir_names(&world.scratch),
        leftover_branches: Vec::new(),
        leftover_blobs: Vec::new(),
    };
    if let Some(remote) = &world.git_remote {
        audit.leftover_branches = list_remote_branches(remote).await;
    }
    if let Some(store) = &world.blob_store {
        audit.leftover_blobs = store.blob_paths();
    }
    audit
}

/// Poll the world's namespaced resources until they are all reclaimed or the
/// deadline passes; cleanup runs asynchronously after the terminal ACK, so
/// a freshly terminal run may still be mid-release.
pub async fn audit_world(world: &World) -> FsAudit {
    let deadline = std::time::Instant::now() + Duration::from_secs(8);
    loop {
        let audit = gather(world).await;
        if audit.is_clean() || std::time::Instant::now() >= deadline {
            return audit;
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
    }
}

/// Every violation found in one run's logs and resource audit. Empty means
/// the run upheld all global invariants.
pub fn check_invariants(log: &TransitionLog, fs: &FsAudit) -> Vec<String> {
    let tables = fixture_tables();
    let mut violations = Vec::new();

    for (from, event, to) in &log.delegation {
        if !tables.delegation.contains(&(from.clone(), event.clone(), to.clone())) {
            violations.push(format!(
                "delegation transition ({from}, {event}, {to}) is outside the conformance table"
            ));
        }
    }
    for (from, event, to) in &log.assignment {
        if !tables.assignment.contains(&(from.clone(), event.clone(), to.clone())) {
            violations.push(format!(
                "assignment transition ({from}, {event}, {to}) is outside the conformance table"
            ));
        }
    }

    match &log.delegator_terminal {
        None => violations.push("delegation never reached a terminal state".into()),
        Some(state) if !tables.delegation_terminal.contains(state) => {
            violations.push(format!("delegation settled in non-terminal state {state}"));
        }
        Some(_) => {}
    }
    if let Some(state) = &log.executor_terminal {
        if !tables.assignment_terminal.contains(state) {
            violations.push(format!("assignment settled in non-terminal state {state}"));
        }
    }

    // Terminal pairing: outcomes the two sides can legitimately disagree on
    // are the delegator failing before the executor ever accepted work, or
    // the executor erroring out a lease the delegator expired or cancelled.
    let pair = (
        log.delegator_terminal.as_deref().unwrap_or("?"),
        log.executor_terminal.as_deref(),
    );
    let allowed = matches!(
        pair,
        ("completed", Some("completed"))
            | ("error", Some("error"))
            | ("error", None)
            | ("expired", Some("error"))
            | ("expired", None)
            | ("cancelled", Some("error"))
            | ("cancelled", None)
    );
    if !allowed {
        violations.push(format!(
            "terminal pairing delegator={} executor={} is not an allowed outcome",
            pair.0,
            pair.1.unwrap_or("<none>")
        ));
    }

    for name in &fs.leftover_work_dirs {
        violations.push(format!("executor work dir {name} was not reclaimed"));
    }
    for name in &fs.leftover_scratch {
        violations.push(format!("executor scratch entry {name} was not reclaimed"));
    }
    for name in &fs.leftover_branches {
        violations.push(format!("remote branch {name} was not deleted"));
    }
    for name in &fs.leftover_blobs {
        violations.push(format!("blob {name} was not deleted"));
    }

    violations
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_tables_load_and_look_sane() {
        let tables = fixture_tables();
        assert!(tables.delegation.contains(&(
            "created".into(),
            "SEND_INVITE".into(),
            "invited".into()
        )));
        assert!(tables.assignment.contains(&(
            "pending".into(),
            "RECV_START".into(),
            "active".into()
        )));
        assert!(tables.delegation_terminal.contains("expired"));
        assert!(tables.assignment_terminal.contains("error"));
        assert!(!tables.delegation.contains(&(
            "created".into(),
            "EXPIRE".into(),
            "expired".into()
        )));
    }

    fn clean_log() -> TransitionLog {
        TransitionLog {
            delegation: vec![
                ("created".into(), "SEND_INVITE".into(), "invited".into()),
                ("invited".into(), "RECV_ACCEPT".into(), "accepted".into()),
                ("accepted".into(), "SEND_START".into(), "started".into()),
                ("started".into(), "SETUP_COMPLETE".into(), "running".into()),
                ("running".into(), "RECV_DONE".into(), "completed".into()),
            ],
            assignment: vec![
                ("pending".into(), "RECV_START".into(), "active".into()),
                ("active".into(), "TASK_COMPLETE".into(), "completed".into()),
            ],
            delegator_terminal: Some("completed".into()),
            executor_terminal: Some("completed".into()),
        }
    }

    #[test]
    fn clean_run_has_no_violations() {
        let violations = check_invariants(&clean_log(), &FsAudit::default());
        assert!(violations.is_empty(), "{violations:?}");
    }

    #[test]
    fn illegal_transition_is_reported() {
        let mut log = clean_log();
        log.delegation.push(("completed".into(), "EXPIRE".into(), "expired".into()));
        let violations = check_invariants(&log, &FsAudit::default());
        assert!(violations.iter().any(|v| v.contains("outside the conformance table")));
    }

    #[test]
    fn mismatched_terminals_are_reported() {
        let mut log = clean_log();
        log.executor_terminal = Some("error".into());
        let violations = check_invariants(&log, &FsAudit::default());
        assert!(violations.iter().any(|v| v.contains("terminal pairing")));
    }

    #[test]
    fn leftover_resources_are_reported() {
        let fs = FsAudit {
            leftover_work_dirs: vec!["d-123".into()],
            leftover_scratch: Vec::new(),
            leftover_branches: vec!["awcp/d-123".into()],
            leftover_blobs: vec!["awcp/d-123/workspace.zip".into()],
        };
        let violations = check_invariants(&clean_log(), &fs);
        assert_eq!(violations.len(), 3);
    }

    #[test]
    fn canonical_log_collapses_replayed_self_loops() {
        let mut log = clean_log();
        let snap = ("running".into(), "SNAPSHOT_RECEIVED".into(), "running".into());
        log.delegation.insert(4, snap.clone());
        log.delegation.insert(5, snap.clone());
        let canonical = log.canonical_delegation();
        assert_eq!(canonical.iter().filter(|t| *t == &snap).count(), 1);
        assert_eq!(canonical.len(), 6);
    }
}
