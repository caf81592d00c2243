//! Conformance and fault-injection harness for the delegation stack. It
//! drives real delegator/executor pairs over loopback HTTP through an
//! optional misbehaving proxy, derives every run from a seed so failures
//! replay exactly, and holds each run to the same global invariants: all
//! observed transitions appear in the published conformance tables, both
//! sides land in compatible terminal states, and every namespaced resource
//! is reclaimed.

pub mod audit;
pub mod fault;
pub mod proxy;
pub mod runner;
pub mod scenario;
pub mod world;

pub use audit::{audit_world, check_invariants, fixture_tables, FsAudit, TransitionLog};
pub use fault::{FaultKind, FaultSchedule, PlannedFault};
pub use proxy::{FaultProxy, ProxyFaults};
pub use runner::{
    derive_spec, expected_for, run_one, run_randomized_suite, BackendKind, Expectation,
    RunReport, RunSpec, SuiteReport,
};
pub use scenario::{run_scenario, scenario_names, Check, ScenarioReport};
pub use world::{seed_origin, World, WorldConfig};
