//! Long-running randomized soak: N seeded delegations with a configurable
//! fault rate, checked against the conformance tables and resource audits.
//! Exits nonzero if any run violates an invariant.

use std::path::PathBuf;
use std::process::ExitCode;

use awcp_harness::{run_randomized_suite, FaultSchedule};
use clap::Parser;

#[derive(Parser)]
#[command(name = "awcp-soak", about = "Seeded randomized soak for the delegation stack")]
struct Args {
    /// How many delegations to run.
    #[arg(long, default_value_t = 1000)]
    runs: u32,
    /// Suite seed; identical seeds replay identical suites.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// How many runs may be in flight at once.
    #[arg(long, default_value_t = 8)]
    parallelism: usize,
    /// Fraction of runs that get one injected fault.
    #[arg(long, default_value_t = 0.2)]
    fault_rate: f64,
    /// Write the full JSON report here.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Root directory for run workspaces (default: a fresh temp dir).
    #[arg(long)]
    root: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    // Every run parks its short-lived temp files under the suite root, so a
    // leak anywhere in the stack shows up in the final sweep below.
    let keeper;
    let root = match &args.root {
        Some(root) => {
            std::fs::create_dir_all(root).expect("suite root is creatable");
            root.clone()
        }
        None => {
            keeper = tempfile::TempDir::new().expect("temp suite root");
            keeper.path().to_path_buf()
        }
    };
    let tmp = root.join("tmp");
    std::fs::create_dir_all(&tmp).expect("tmp dir under the suite root");
    std::env::set_var("TMPDIR", &tmp);

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime");
    let schedule = FaultSchedule::generate(args.seed, args.runs, args.fault_rate);
    let report = runtime.block_on(run_randomized_suite(
        args.runs,
        args.seed,
        args.parallelism,
        &schedule,
        &root,
    ));
    runtime.shutdown_timeout(std::time::Duration::from_secs(5));

    let mut leaks = Vec::new();
    if let Ok(entries) = std::fs::read_dir(&tmp) {
        for entry in entries.filter_map(|e| e.ok()) {
            leaks.push(entry.file_name().to_string_lossy().into_owned());
        }
    }

    print!("{}", report.human_summary());
    if !leaks.is_empty() {
        println!("LEAK {} entries left under the suite tmp dir: {leaks:?}", leaks.len());
    }
    if let Some(path) = &args.json {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(path, json).expect("report file is writable");
        println!("json report written to {}", path.display());
    }

    if report.passed() && leaks.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
