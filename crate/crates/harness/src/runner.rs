//! Randomized end-to-end runs. Each run derives its shape (transport, lease,
//! policy, backend, fault) from `(suite seed, run index)`, drives a real
//! delegator/executor pair over loopback HTTP, and checks the outcome
//! against an exact expectation table plus the global invariants.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use awcp_core::error::ErrorCode;
use awcp_core::lifecycle::{AssignmentState, DelegationState};
use awcp_core::message::LeaseMode;
use awcp_core::TransportKind;
use awcp_sdk::SnapshotPolicy;
use awcp_sdk::delegator::{Progress, ProgressKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tokio::sync::Semaphore;
use tokio::task::JoinSet;

use crate::audit::{audit_world, check_invariants, FsAudit, TransitionLog};
use crate::fault::{FaultKind, FaultSchedule};
use crate::world::{seed_origin, World, WorldConfig};

/// Scripted executor backends with known behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    /// Writes `out.txt` and succeeds immediately.
    Writer,
    /// Reads the tree, writes nothing, succeeds.
    Reader,
    /// Sleeps past any short lease; success is unreachable under expiry.
    Sleeper,
    /// Like Writer but holds the running state long enough for a crash to
    /// land inside it.
    PausedWriter,
}

impl BackendKind {
    pub fn script(&self) -> &'static str {
        match self {
            BackendKind::Writer => {
                "set -e; printf 'delegated output\\n' > out.txt; echo AWCP_SUMMARY: wrote out.txt"
            }
            BackendKind::Reader => {
                "set -e; ls > /dev/null; echo AWCP_SUMMARY: inspected the workspace"
            }
            BackendKind::Sleeper => "sleep 4; echo AWCP_SUMMARY: woke up",
            BackendKind::PausedWriter => {
                "set -e; sleep 0.4; printf 'delegated output\\n' > out.txt; echo AWCP_SUMMARY: wrote out.txt"
            }
        }
    }
}

/// Everything one run needs, reproducible from `(suite_seed, index)` plus
/// the schedule.
#[derive(Debug, Clone, Serialize)]
pub struct RunSpec {
    pub index: u32,
    pub suite_seed: u64,
    pub transport: TransportKind,
    pub policy: SnapshotPolicy,
    pub mode: LeaseMode,
    pub ttl_seconds: u64,
    pub backend: BackendKind,
    pub auth: bool,
    pub fault: Option<FaultKind>,
}

pub fn derive_spec(suite_seed: u64, index: u32, schedule: &FaultSchedule) -> RunSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(
        suite_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64 + 1),
    );
    let fault = schedule.fault_for(index);
    let transport = match fault {
        // The live lane stays unfaulted; transport faults target the
        // snapshot transports, and archive is the only one whose bytes ride
        // inside START where the proxy can flip them.
        None => [
            TransportKind::Archive,
            TransportKind::Storage,
            TransportKind::Git,
            TransportKind::LoopbackLive,
        ][rng.random_range(0..4usize)],
        Some(FaultKind::CorruptArchiveByte) => TransportKind::Archive,
        Some(_) => [TransportKind::Archive, TransportKind::Storage, TransportKind::Git]
            [rng.random_range(0..3usize)],
    };
    let mode = match fault {
        None if rng.random_bool(0.25) => LeaseMode::ReadOnly,
        _ => LeaseMode::ReadWrite,
    };
    let backend = match fault {
        Some(FaultKind::ExpireMidRun) => BackendKind::Sleeper,
        Some(FaultKind::CrashDelegatorAfter { .. }) => BackendKind::PausedWriter,
        _ if mode == LeaseMode::ReadOnly => BackendKind::Reader,
        _ => BackendKind::Writer,
    };
    let policy = match fault {
        // Crash runs use auto so recovery's replay dedupe is what keeps the
        // applied count at one.
        Some(FaultKind::CrashDelegatorAfter { .. }) => SnapshotPolicy::Auto,
        _ => [SnapshotPolicy::Auto, SnapshotPolicy::Staged, SnapshotPolicy::Discard]
            [rng.random_range(0..3usize)],
    };
    let ttl_seconds = if fault == Some(FaultKind::ExpireMidRun) { 1 } else { 60 };
    let auth = rng.random_bool(0.2);
    RunSpec {
        index,
        suite_seed,
        transport,
        policy,
        mode,
        ttl_seconds,
        backend,
        auth,
        fault,
    }
}

/// The exact outcome a spec must produce.
#[derive(Debug, Clone, Serialize)]
pub struct Expectation {
    pub delegation: DelegationState,
    pub assignment: Option<AssignmentState>,
    pub error_code: Option<ErrorCode>,
    /// Snapshots reconciled into the origin once staged reviews are done.
    pub applied: usize,
    /// Whether the Writer's `out.txt` must exist at the origin afterwards.
    pub out_txt_present: bool,
}

pub fn expected_for(spec: &RunSpec) -> Expectation {
    let snapshot_transport = matches!(
        spec.transport,
        TransportKind::Archive | TransportKind::Storage | TransportKind::Git
    );
    let writes = matches!(spec.backend, BackendKind::Writer | BackendKind::PausedWriter);
    match spec.fault {
        None
        | Some(FaultKind::DelayEvent { .. })
        | Some(FaultKind::DuplicateDone)
        | Some(FaultKind::CrashDelegatorAfter { .. }) => {
            let applied = if snapshot_transport
                && spec.mode == LeaseMode::ReadWrite
                && spec.policy != SnapshotPolicy::Discard
            {
                1
            } else {
                0
            };
            let out_txt_present = writes
                && (applied == 1 || spec.transport == TransportKind::LoopbackLive);
            Expectation {
                delegation: DelegationState::Completed,
                assignment: Some(AssignmentState::Completed),
                error_code: None,
                applied,
                out_txt_present,
            }
        }
        Some(FaultKind::DropStart) => Expectation {
            delegation: DelegationState::Error,
            assignment: Some(AssignmentState::Error),
            error_code: Some(ErrorCode::TransportUnavailable),
            applied: 0,
            out_txt_present: false,
        },
        Some(FaultKind::CorruptArchiveByte) => Expectation {
            delegation: DelegationState::Error,
            assignment: Some(AssignmentState::Error),
            error_code: Some(ErrorCode::IntegrityMismatch),
            applied: 0,
            out_txt_present: false,
        },
        Some(FaultKind::ExpireMidRun) => Expectation {
            delegation: DelegationState::Expired,
            assignment: Some(AssignmentState::Error),
            error_code: Some(ErrorCode::LeaseExpired),
            applied: 0,
            out_txt_present: false,
        },
    }
}

/// What one run produced, with every violation it tripped.
#[derive(Debug, Serialize)]
pub struct RunReport {
    pub spec: RunSpec,
    pub delegation_id: Option<String>,
    pub log: Option<TransitionLog>,
    pub error_code: Option<String>,
    pub acks: usize,
    pub applied: usize,
    pub fs: FsAudit,
    pub violations: Vec<String>,
    pub duration_ms: u128,
}

impl RunReport {
    fn failed(spec: &RunSpec, violation: String, started: Instant) -> RunReport {
        RunReport {
            spec: spec.clone(),
            delegation_id: None,
            log: None,
            error_code: None,
            acks: 0,
            applied: 0,
            fs: FsAudit::default(),
            violations: vec![violation],
            duration_ms: started.elapsed().as_millis(),
        }
    }
}

fn spawn_progress_collector(
    world: &World,
    sink: Arc<Mutex<Vec<Progress>>>,
) -> tokio::task::JoinHandle<()> {
    let mut rx = world.delegator.subscribe_progress();
    tokio::spawn(async move {
        loop {
            match rx.recv().await {
                Ok(progress) => sink.lock().unwrap().push(progress),
                Err(tokio::sync::broadcast::error::RecvError::Lagged(_)) => continue,
                Err(tokio::sync::broadcast::error::RecvError::Closed) => return,
            }
        }
    })
}

/// Drive one spec end to end and audit everything it touched. The run
/// directory is removed afterwards unless a violation was found.
pub async fn run_one(root: &Path, spec: &RunSpec) -> RunReport {
    let started = Instant::now();
    let run_root = root.join(format!("run-{:05}", spec.index));
    let mut config = WorldConfig::new(&run_root);
    config.transport = spec.transport;
    config.policy = spec.policy;
    config.mode = spec.mode;
    config.ttl_seconds = spec.ttl_seconds;
    config.backend_script = spec.backend.script().into();
    config.auth_token = spec.auth.then(|| format!("token-{}", spec.index));
    config.fault_seed = spec.suite_seed ^ u64::from(spec.index);
    match spec.fault {
        Some(FaultKind::DropStart) => config.faults.drop_start = true,
        Some(FaultKind::CorruptArchiveByte) => config.faults.corrupt_start_byte = true,
        Some(FaultKind::DelayEvent { millis }) => config.faults.delay_events_ms = Some(millis),
        Some(FaultKind::DuplicateDone) => config.faults.duplicate_done = true,
        // A stalled first event stream keeps the persisted state at
        // `started` long enough for the crash to land there.
        Some(FaultKind::CrashDelegatorAfter { state: DelegationState::Started }) => {
            config.faults.delay_events_ms = Some(600);
        }
        _ => {}
    }

    let mut world = match World::build(config).await {
        Ok(world) => world,
        Err(err) => return RunReport::failed(spec, format!("world construction: {err}"), started),
    };
    if let Err(err) = seed_origin(&world.origin, spec.suite_seed ^ u64::from(spec.index)) {
        world.shutdown().await;
        return RunReport::failed(spec, format!("origin seeding: {err}"), started);
    }

    let progress: Arc<Mutex<Vec<Progress>>> = Arc::new(Mutex::new(Vec::new()));
    let mut collectors = vec![spawn_progress_collector(&world, progress.clone())];

    let mut violations = Vec::new();
    let delegation_id = match world.delegator.delegate(world.request("randomized run")).await {
        Ok(id) => id,
        Err(err) => {
            world.shutdown().await;
            return RunReport::failed(spec, format!("delegate refused: {err}"), started);
        }
    };

    let accepted = match world.delegator.record(&delegation_id).await {
        Some(record) if !record.is_terminal() => true,
        _ => false,
    };
    if accepted {
        let _ = world.delegator.start(&delegation_id).await;
    }

    if let Some(FaultKind::CrashDelegatorAfter { state }) = spec.fault {
        world.wait_delegation_state(&delegation_id, state, Duration::from_secs(5)).await;
        world.rebuild_delegator().await;
        collectors.push(spawn_progress_collector(&world, progress.clone()));
        let outcomes = world.delegator.recover_all().await;
        for outcome in outcomes {
            if let Some(err) = outcome.error {
                violations.push(format!("recovery error: {err}"));
            }
        }
    }

    let delegation_state =
        match world.wait_delegation_terminal(&delegation_id, Duration::from_secs(15)).await {
            Ok(state) => Some(state),
            Err(err) => {
                violations.push(err.to_string());
                world.delegator.record(&delegation_id).await.map(|r| r.state)
            }
        };
    let assignment_state =
        match world.wait_assignment_terminal(&delegation_id, Duration::from_secs(10)).await {
            Ok(state) => state,
            Err(err) => {
                violations.push(err.to_string());
                world.executor.assignment_state(&delegation_id).await
            }
        };

    // Staged runs hold their snapshots for review; approve them all so the
    // post-conditions and the resource audit see the reviewed end state.
    if let Some(record) = world.delegator.record(&delegation_id).await {
        for descriptor in &record.pending_snapshots {
            if let Err(err) =
                world.delegator.approve_snapshot(&delegation_id, &descriptor.snapshot_id).await
            {
                violations.push(format!(
                    "approval of staged snapshot {} failed: {err}",
                    descriptor.snapshot_id
                ));
            }
        }
    }

    let record = world.delegator.record(&delegation_id).await;
    let (log, error_code, applied) = match &record {
        Some(record) => {
            let assignment_history = world.executor.assignment_history(&delegation_id).await;
            (
                Some(TransitionLog::new(
                    &record.history,
                    assignment_history.as_deref(),
                    delegation_state,
                    assignment_state,
                )),
                record.last_error.as_ref().map(|e| e.code),
                record.applied_snapshot_ids.len(),
            )
        }
        None => (None, None, 0),
    };

    let expectation = expected_for(spec);
    if delegation_state != Some(expectation.delegation) {
        violations.push(format!(
            "delegation ended {:?}, expected {:?}",
            delegation_state, expectation.delegation
        ));
    }
    if assignment_state != expectation.assignment {
        violations.push(format!(
            "assignment ended {:?}, expected {:?}",
            assignment_state, expectation.assignment
        ));
    }
    if let Some(expected_code) = expectation.error_code {
        if error_code != Some(expected_code) {
            violations.push(format!(
                "last error was {:?}, expected {:?}",
                error_code, expected_code
            ));
        }
    }
    if applied != expectation.applied {
        violations.push(format!(
            "{applied} snapshots applied, expected {}",
            expectation.applied
        ));
    }
    let out_txt = world.origin.join("out.txt");
    match (out_txt.exists(), expectation.out_txt_present) {
        (false, true) => violations.push("backend output never reached the origin".into()),
        (true, false) => violations.push("origin gained out.txt it should not have".into()),
        (true, true) => {
            let content = std::fs::read_to_string(&out_txt).unwrap_or_default();
            if content != "delegated output\n" {
                violations.push(format!("out.txt content mismatch: {content:?}"));
            }
        }
        (false, false) => {}
    }

    let fs = audit_world(&world).await;
    if let Some(log) = &log {
        violations.extend(check_invariants(log, &fs));
    } else {
        violations.push("no delegation record survived the run".into());
    }

    // Exactly one ACK per completed delegation; a crash can eat the window
    // between persisting DONE and acking it, so those runs may show zero.
    for collector in collectors {
        collector.abort();
    }
    let acks = progress
        .lock()
        .unwrap()
        .iter()
        .filter(|p| p.delegation_id == delegation_id && matches!(p.kind, ProgressKind::AckSent))
        .count();
    let crash_run = matches!(spec.fault, Some(FaultKind::CrashDelegatorAfter { .. }));
    if acks > 1 {
        violations.push(format!("terminal ACK sent {acks} times"));
    }
    if delegation_state == Some(DelegationState::Completed) && acks != 1 && !crash_run {
        violations.push(format!("completed run sent {acks} ACKs, expected exactly one"));
    }

    world.shutdown().await;
    if violations.is_empty() {
        let _ = std::fs::remove_dir_all(&run_root);
    }

    RunReport {
        spec: spec.clone(),
        delegation_id: Some(delegation_id),
        log,
        error_code: error_code.map(|c| c.to_string()),
        acks,
        applied,
        fs,
        violations,
        duration_ms: started.elapsed().as_millis(),
    }
}

/// Aggregate outcome of a randomized suite.
#[derive(Debug, Serialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub runs: u32,
    pub parallelism: usize,
    pub terminal_counts: BTreeMap<String, usize>,
    pub fault_counts: BTreeMap<String, usize>,
    pub clean_runs: usize,
    pub violations: Vec<String>,
    pub wall_ms: u128,
    pub reports: Vec<RunReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn human_summary(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{} runs, seed {}, parallelism {}: {} clean, {} violations, {:.1}s\n",
            self.runs,
            self.seed,
            self.parallelism,
            self.clean_runs,
            self.violations.len(),
            self.wall_ms as f64 / 1000.0
        ));
        out.push_str("terminal states:\n");
        for (state, count) in &self.terminal_counts {
            out.push_str(&format!("  {state}: {count}\n"));
        }
        if !self.fault_counts.is_empty() {
            out.push_str("faults injected:\n");
            for (fault, count) in &self.fault_counts {
                out.push_str(&format!("  {fault}: {count}\n"));
            }
        }
        for violation in self.violations.iter().take(20) {
            out.push_str(&format!("VIOLATION {violation}\n"));
        }
        if self.violations.len() > 20 {
            out.push_str(&format!("... and {} more\n", self.violations.len() - 20));
        }
        out
    }
}

pub async fn run_randomized_suite(
    runs: u32,
    seed: u64,
    parallelism: usize,
    schedule: &FaultSchedule,
    root: &Path,
) -> SuiteReport {
    let started = Instant::now();
    let semaphore = Arc::new(Semaphore::new(parallelism.max(1)));
    let mut set = JoinSet::new();
    for index in 0..runs {
        let spec = derive_spec(seed, index, schedule);
        let root: PathBuf = root.to_path_buf();
        let semaphore = semaphore.clone();
        set.spawn(async move {
            let _permit = semaphore.acquire_owned().await.expect("semaphore open");
            run_one(&root, &spec).await
        });
    }

    let mut reports = Vec::with_capacity(runs as usize);
    while let Some(joined) = set.join_next().await {
        match joined {
            Ok(report) => reports.push(report),
            Err(err) => panic!("run task panicked: {err}"),
        }
    }
    reports.sort_by_key(|r| r.spec.index);

    let mut terminal_counts = BTreeMap::new();
    let mut fault_counts = BTreeMap::new();
    let mut violations = Vec::new();
    let mut clean_runs = 0usize;
    for report in &reports {
        let terminal = report
            .log
            .as_ref()
            .and_then(|l| l.delegator_terminal.clone())
            .unwrap_or_else(|| "none".into());
        *terminal_counts.entry(terminal).or_insert(0) += 1;
        if let Some(fault) = report.spec.fault {
            *fault_counts.entry(fault.name().to_string()).or_insert(0) += 1;
        }
        if report.violations.is_empty() {
            clean_runs += 1;
        }
        for violation in &report.violations {
            violations.push(format!("run {:05}: {violation}", report.spec.index));
        }
    }

    SuiteReport {
        seed,
        runs,
        parallelism,
        terminal_counts,
        fault_counts,
        clean_runs,
        violations,
        wall_ms: started.elapsed().as_millis(),
        reports,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    #[test]
    fn specs_replay_identically_from_their_seed() {
        let schedule = FaultSchedule::generate(11, 64, 0.4);
        for index in 0..64 {
            let a = derive_spec(11, index, &schedule);
            let b = derive_spec(11, index, &schedule);
            assert_eq!(format!("{a:?}"), format!("{b:?}"));
        }
    }

    #[test]
    fn spec_derivation_respects_fault_pairing() {
        let schedule = FaultSchedule::generate(5, 400, 0.5);
        for index in 0..400 {
            let spec = derive_spec(5, index, &schedule);
            match spec.fault {
                Some(FaultKind::CorruptArchiveByte) => {
                    assert_eq!(spec.transport, TransportKind::Archive);
                }
                Some(FaultKind::ExpireMidRun) => {
                    assert_eq!(spec.backend, BackendKind::Sleeper);
                    assert_eq!(spec.ttl_seconds, 1);
                }
                Some(FaultKind::CrashDelegatorAfter { .. }) => {
                    assert_eq!(spec.policy, SnapshotPolicy::Auto);
                    assert_ne!(spec.transport, TransportKind::LoopbackLive);
                }
                Some(_) => assert_ne!(spec.transport, TransportKind::LoopbackLive),
                None => {}
            }
            if spec.mode == LeaseMode::ReadOnly {
                assert_eq!(spec.backend, BackendKind::Reader);
            }
        }
    }

    #[tokio::test(flavor = "multi_thread", worker_threads = 4)]
    async fn identical_specs_produce_identical_canonical_logs() {
        let schedule = FaultSchedule::none(21);
        let spec = derive_spec(21, 0, &schedule);
        let dir = TempDir::new().unwrap();
        let first = run_one(dir.path().join("a").as_path(), &spec).await;
        let second = run_one(dir.path().join("b").as_path(), &spec).await;
        assert!(first.violations.is_empty(), "{:?}", first.violations);
        assert!(second.violations.is_empty(), "{:?}", second.violations);
        let a = first.log.unwrap();
        let b = second.log.unwrap();
        assert_eq!(a.canonical_delegation(), b.canonical_delegation());
        assert_eq!(a.assignment, b.assignment);
        assert_eq!(a.delegator_terminal, b.delegator_terminal);
    }

    #[tokio::test(flavor = "multi_thread", worker_threads = 4)]
    async fn small_faulted_suite_stays_clean() {
        let schedule = FaultSchedule {
            seed: 3,
            faults: vec![
                crate::fault::PlannedFault { kind: FaultKind::DropStart, when: 1 },
                crate::fault::PlannedFault {
                    kind: FaultKind::DelayEvent { millis: 40 },
                    when: 2,
                },
            ],
        };
        let dir = TempDir::new().unwrap();
        let report = run_randomized_suite(4, 3, 4, &schedule, dir.path()).await;
        assert!(report.passed(), "{}", report.human_summary());
        assert_eq!(report.clean_runs, 4);
        assert_eq!(report.terminal_counts.get("error"), Some(&1));
    }
}
