//! Seeded fault planning for randomized suites. A schedule decides, per run
//! index, whether that run gets a fault and which one, so a failing run can
//! be replayed exactly from `(seed, index)`.

use awcp_core::lifecycle::DelegationState;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One injectable failure. Transport faults are realized by the proxy;
/// crash and expiry faults are choreographed by the runner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FaultKind {
    /// The START request's connection dies before any reply.
    DropStart,
    /// The first event-stream response stalls before its first byte.
    DelayEvent { millis: u64 },
    /// One byte of the inline archive flips in flight.
    CorruptArchiveByte,
    /// The delegator process dies once the named state is persisted, then a
    /// fresh process recovers from disk.
    CrashDelegatorAfter { state: DelegationState },
    /// The lease is sized so it expires while the backend still runs.
    ExpireMidRun,
    /// The event stream tears right before `done`, and the reconnect loses
    /// its resume cursor, so the server replays everything.
    DuplicateDone,
}

impl FaultKind {
    pub fn name(&self) -> &'static str {
        match self {
            FaultKind::DropStart => "drop-start",
            FaultKind::DelayEvent { .. } => "delay-event",
            FaultKind::CorruptArchiveByte => "corrupt-archive-byte",
            FaultKind::CrashDelegatorAfter { .. } => "crash-delegator",
            FaultKind::ExpireMidRun => "expire-mid-run",
            FaultKind::DuplicateDone => "duplicate-done",
        }
    }
}

/// A fault pinned to the run index it fires on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedFault {
    pub kind: FaultKind,
    pub when: u32,
}

/// The full fault plan for a suite. Two schedules built from the same
/// arguments are identical.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSchedule {
    pub seed: u64,
    pub faults: Vec<PlannedFault>,
}

impl FaultSchedule {
    /// No faults at all; every run must complete cleanly.
    pub fn none(seed: u64) -> Self {
        FaultSchedule { seed, faults: Vec::new() }
    }

    /// Roughly `rate` of the first `n` runs get one fault each, drawn
    /// uniformly across the kinds.
    pub fn generate(seed: u64, n: u32, rate: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00fa_017e_d5ee_d000);
        let mut faults = Vec::new();
        for when in 0..n {
            if rng.random_bool(rate.clamp(0.0, 1.0)) {
                faults.push(PlannedFault { kind: pick(&mut rng), when });
            }
        }
        FaultSchedule { seed, faults }
    }

    pub fn fault_for(&self, index: u32) -> Option<FaultKind> {
        self.faults.iter().find(|f| f.when == index).map(|f| f.kind)
    }
}

fn pick(rng: &mut ChaCha8Rng) -> FaultKind {
    match rng.random_range(0..6u32) {
        0 => FaultKind::DropStart,
        1 => {
            let millis = [40, 120, 250][rng.random_range(0..3usize)];
            FaultKind::DelayEvent { millis }
        }
        2 => FaultKind::CorruptArchiveByte,
        3 => {
            let state = if rng.random_bool(0.5) {
                DelegationState::Started
            } else {
                DelegationState::Running
            };
            FaultKind::CrashDelegatorAfter { state }
        }
        4 => FaultKind::ExpireMidRun,
        _ => FaultKind::DuplicateDone,
    }
}
