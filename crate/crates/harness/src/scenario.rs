//! Scripted end-to-end scenarios with hand-written expected outcomes. Each
//! returns a named check list instead of panicking, so callers can print
//! one line per check.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use awcp_core::error::ErrorCode;
use awcp_core::lifecycle::{AssignmentState, DelegationState};
use awcp_core::message::LeaseMode;
use awcp_core::TransportKind;
use awcp_sdk::SnapshotPolicy;
use awcp_sdk::delegator::ProgressKind;
use chrono::{DateTime, Utc};
use serde::Serialize;

use crate::world::{World, WorldConfig};

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub checks: Vec<Check>,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn human_summary(&self) -> String {
        let mut out = format!("scenario {}\n", self.name);
        for check in &self.checks {
            let mark = if check.pass { "ok " } else { "FAIL" };
            out.push_str(&format!("  {mark} {}: {}\n", check.name, check.detail));
        }
        out
    }
}

pub fn scenario_names() -> &'static [&'static str] {
    &["curation", "two-round-compliance", "live-sync"]
}

pub async fn run_scenario(name: &str, root: &Path) -> anyhow::Result<ScenarioReport> {
    match name {
        "curation" => curation(root).await,
        "two-round-compliance" => two_round_compliance(root).await,
        "live-sync" => live_sync(root).await,
        other => anyhow::bail!("unknown scenario {other}"),
    }
}

fn check(checks: &mut Vec<Check>, name: &str, pass: bool, detail: impl Into<String>) {
    checks.push(Check { name: name.into(), pass, detail: detail.into() });
}

fn collect_files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        let Ok(entries) = std::fs::read_dir(dir) else { return };
        for entry in entries.filter_map(|e| e.ok()) {
            let path = entry.path();
            if path.is_dir() {
                walk(base, &path, out);
            } else if let Ok(bytes) = std::fs::read(&path) {
                let rel = path.strip_prefix(base).unwrap().to_string_lossy().into_owned();
                out.insert(rel, bytes);
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// A messy flat folder goes out; a tidied folder comes back. The backend
/// moves notes into docs/ and tabular files into data/, and every byte must
/// survive the round trip.
async fn curation(root: &Path) -> anyhow::Result<ScenarioReport> {
    let mut config = WorldConfig::new(root);
    config.backend_script = "set -e; mkdir -p docs data; mv ./*.md docs/; mv ./*.csv data/; \
                             echo AWCP_SUMMARY: filed documents under docs and data"
        .into();
    let world = World::build(config).await?;

    let files: &[(&str, &str)] = &[
        ("meeting-alpha.md", "# alpha\nagenda and decisions\n"),
        ("meeting-beta.md", "# beta\nminutes\n"),
        ("metrics-q1.csv", "week,count\n1,10\n2,12\n"),
        ("metrics-q2.csv", "week,count\n14,9\n15,17\n"),
        ("readme.txt", "drop zone for unsorted documents\n"),
    ];
    for (name, content) in files {
        std::fs::write(world.origin.join(name), content)?;
    }
    let before = collect_files(&world.origin);

    let mut checks = Vec::new();
    let id = world.delegator.delegate(world.request("file the loose documents")).await?;
    world.delegator.start(&id).await?;
    let state = world.wait_delegation_terminal(&id, Duration::from_secs(15)).await?;
    check(
        &mut checks,
        "delegation completed",
        state == DelegationState::Completed,
        format!("terminal state {state}"),
    );

    let after = collect_files(&world.origin);
    let expected: Vec<String> = vec![
        "data/metrics-q1.csv".into(),
        "data/metrics-q2.csv".into(),
        "docs/meeting-alpha.md".into(),
        "docs/meeting-beta.md".into(),
        "readme.txt".into(),
    ];
    let got: Vec<String> = after.keys().cloned().collect();
    check(
        &mut checks,
        "layout matches the curation plan",
        got == expected,
        format!("{got:?}"),
    );

    let mut preserved = true;
    let mut detail = String::from("all contents intact");
    for (old_path, bytes) in &before {
        let new_path = match old_path.rsplit_once('.').map(|(_, ext)| ext) {
            Some("md") => format!("docs/{old_path}"),
            Some("csv") => format!("data/{old_path}"),
            _ => old_path.clone(),
        };
        if after.get(&new_path) != Some(bytes) {
            preserved = false;
            detail = format!("{old_path} changed or vanished on its way to {new_path}");
            break;
        }
    }
    check(&mut checks, "contents preserved byte for byte", preserved, detail);

    world.shutdown().await;
    Ok(ScenarioReport { name: "curation".into(), checks })
}

/// The same workspace is delegated twice. Round one fails because a required
/// approval file is missing; the operator adds it; round two succeeds and
/// its decision lands back at the origin. The two delegations must stay
/// fully independent.
async fn two_round_compliance(root: &Path) -> anyhow::Result<ScenarioReport> {
    let mut config = WorldConfig::new(root);
    config.backend_script = "if [ -f approvals/request.txt ]; then \
                             mkdir -p approvals; \
                             printf 'approved\\n' > approvals/decision.txt; \
                             echo AWCP_SUMMARY: recorded the decision; \
                             else \
                             echo AWCP_SUMMARY: missing approvals/request.txt; \
                             exit 4; fi"
        .into();
    let world = World::build(config).await?;
    std::fs::write(
        world.origin.join("contract.md"),
        "# contract\nneeds a recorded approval decision\n",
    )?;

    let mut checks = Vec::new();

    let first = world.delegator.delegate(world.request("record the approval decision")).await?;
    let _ = world.delegator.start(&first).await;
    let state = world.wait_delegation_terminal(&first, Duration::from_secs(15)).await?;
    check(
        &mut checks,
        "round one ends in error",
        state == DelegationState::Error,
        format!("terminal state {state}"),
    );
    let record = world.delegator.record(&first).await.expect("round one record");
    let code = record.last_error.as_ref().map(|e| e.code);
    check(
        &mut checks,
        "round one reports a backend failure",
        code == Some(ErrorCode::BackendFailed),
        format!("{code:?}"),
    );
    let assignment = world.wait_assignment_terminal(&first, Duration::from_secs(5)).await?;
    check(
        &mut checks,
        "executor marks round one failed",
        assignment == Some(AssignmentState::Error),
        format!("{assignment:?}"),
    );
    check(
        &mut checks,
        "no decision was written in round one",
        !world.origin.join("approvals/decision.txt").exists(),
        "origin untouched",
    );
    let first_history_len = record.history.len();

    // The operator answers the failure by staging the required file, then
    // delegates the same root again.
    std::fs::create_dir_all(world.origin.join("approvals"))?;
    std::fs::write(world.origin.join("approvals/request.txt"), "please approve\n")?;

    let second = world.delegator.delegate(world.request("record the approval decision")).await?;
    check(&mut checks, "rounds get distinct ids", second != first, format!("{first} vs {second}"));
    world.delegator.start(&second).await?;
    let state = world.wait_delegation_terminal(&second, Duration::from_secs(15)).await?;
    check(
        &mut checks,
        "round two completes",
        state == DelegationState::Completed,
        format!("terminal state {state}"),
    );
    let decision = std::fs::read_to_string(world.origin.join("approvals/decision.txt"))
        .unwrap_or_default();
    check(
        &mut checks,
        "decision came back through the snapshot",
        decision == "approved\n",
        format!("{decision:?}"),
    );

    let first_after = world.delegator.record(&first).await.expect("round one record");
    check(
        &mut checks,
        "round one record is untouched by round two",
        first_after.state == DelegationState::Error
            && first_after.history.len() == first_history_len,
        format!("state {} history {}", first_after.state, first_after.history.len()),
    );
    let second_record = world.delegator.record(&second).await.expect("round two record");
    check(
        &mut checks,
        "round two applied exactly one snapshot",
        second_record.applied_snapshot_ids.len() == 1,
        format!("{:?}", second_record.applied_snapshot_ids),
    );

    world.shutdown().await;
    Ok(ScenarioReport { name: "two-round-compliance".into(), checks })
}

/// Continuous synchronization: with a live transport the backend's write is
/// visible at the origin while the task is still running, and no snapshot
/// machinery is involved.
async fn live_sync(root: &Path) -> anyhow::Result<ScenarioReport> {
    let mut config = WorldConfig::new(root);
    config.transport = TransportKind::LoopbackLive;
    config.mode = LeaseMode::ReadWrite;
    config.policy = SnapshotPolicy::Auto;
    config.backend_script =
        "printf 'live signal\\n' > signal.txt; sleep 0.5; echo AWCP_SUMMARY: signalled".into();
    let world = World::build(config).await?;
    std::fs::write(world.origin.join("base.txt"), "already here\n")?;

    let mut checks = Vec::new();
    let observed: Arc<Mutex<Option<DateTime<Utc>>>> = Arc::new(Mutex::new(None));
    let signal_path = world.origin.join("signal.txt");
    let observed_writer = observed.clone();
    let watcher = tokio::spawn(async move {
        loop {
            if signal_path.exists() {
                *observed_writer.lock().unwrap() = Some(Utc::now());
                return;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    });

    let mut progress = world.delegator.subscribe_progress();
    let id = world.delegator.delegate(world.request("write a live signal")).await?;
    world.delegator.start(&id).await?;
    let state = world.wait_delegation_terminal(&id, Duration::from_secs(15)).await?;
    check(
        &mut checks,
        "delegation completed",
        state == DelegationState::Completed,
        format!("terminal state {state}"),
    );

    watcher.abort();
    let observed_at = *observed.lock().unwrap();
    let record = world.delegator.record(&id).await.expect("record");
    let done_at = record
        .history
        .iter()
        .find(|t| t.to == DelegationState::Completed)
        .map(|t| t.at)
        .expect("completion transition recorded");
    check(
        &mut checks,
        "write was visible at the origin before completion",
        observed_at.is_some_and(|at| at < done_at),
        format!("observed {observed_at:?}, completed {done_at:?}"),
    );

    let mut snapshot_events = 0usize;
    while let Ok(p) = progress.try_recv() {
        if p.delegation_id == id
            && matches!(
                p.kind,
                ProgressKind::SnapshotApplied { .. }
                    | ProgressKind::SnapshotQueued { .. }
                    | ProgressKind::SnapshotDiscarded { .. }
            )
        {
            snapshot_events += 1;
        }
    }
    check(
        &mut checks,
        "no snapshot machinery was involved",
        snapshot_events == 0 && record.pending_snapshots.is_empty(),
        format!("{snapshot_events} snapshot events"),
    );
    check(
        &mut checks,
        "preexisting origin file survived",
        std::fs::read_to_string(world.origin.join("base.txt")).unwrap_or_default()
            == "already here\n",
        "base.txt intact",
    );

    world.shutdown().await;
    Ok(ScenarioReport { name: "live-sync".into(), checks })
}
