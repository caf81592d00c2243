//! Executor backends: the pluggable piece that actually works on the
//! provisioned files. The default is a subprocess with a small stdout
//! contract; an HTTP-callback backend posts the task to an external agent
//! instead. Both are opaque to the protocol, which only sees the outcome.

use awcp_core::{LeaseMode, TaskSpec};
use async_trait::async_trait;
use chrono::{DateTime, Utc};
use std::path::PathBuf;
use std::process::Stdio;
use std::sync::{Arc, Mutex};
use tokio::io::{AsyncBufReadExt, BufReader};

/// Everything a backend may know about its assignment.
#[derive(Debug, Clone)]
pub struct BackendContext {
    pub delegation_id: String,
    pub work_dir: PathBuf,
    pub task: TaskSpec,
    pub lease_mode: LeaseMode,
    pub deadline: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendOutcome {
    pub success: bool,
    pub summary: String,
    pub highlights: Vec<String>,
}

impl BackendOutcome {
    pub fn failure(summary: impl Into<String>) -> Self {
        BackendOutcome { success: false, summary: summary.into(), highlights: Vec::new() }
    }
}

/// Receives backend progress lines; the service forwards them as status
/// events.
#[derive(Clone)]
pub struct ProgressSink(Arc<dyn Fn(String) + Send + Sync>);

impl ProgressSink {
    pub fn new(f: impl Fn(String) + Send + Sync + 'static) -> Self {
        ProgressSink(Arc::new(f))
    }

    pub fn ignore() -> Self {
        ProgressSink(Arc::new(|_| {}))
    }

    pub fn emit(&self, line: String) {
        (self.0)(line)
    }
}

/// Where a process backend publishes its child pid, so lease enforcement
/// can verify the process is truly gone.
pub type PidSlot = Arc<Mutex<Option<u32>>>;

#[async_trait]
pub trait Backend: Send + Sync {
    /// Run the task to completion. Cancellation is by dropping this future;
    /// implementations must not outlive it (process backends kill their
    /// child on drop).
    async fn run(&self, ctx: BackendContext, progress: ProgressSink, pid: PidSlot)
        -> BackendOutcome;
}

/// Subprocess backend. Contract: the command runs with the work directory
/// as its working directory and the assignment described in environment
/// variables AWCP_WORKDIR, AWCP_TASK_DESCRIPTION, AWCP_PROMPT,
/// AWCP_LEASE_MODE, and AWCP_DEADLINE. stdout lines starting with
/// `AWCP_SUMMARY:` set the final summary, lines starting with
/// `AWCP_HIGHLIGHT:` append a highlight, every other non-empty line is
/// streamed as progress. Exit code zero is success.
pub struct CommandBackend {
    pub program: String,
    pub args: Vec<String>,
}

impl CommandBackend {
    pub fn new(program: impl Into<String>) -> Self {
        CommandBackend { program: program.into(), args: Vec::new() }
    }

    pub fn with_args(mut self, args: Vec<String>) -> Self {
        self.args = args;
        self
    }
}

#[async_trait]
impl Backend for CommandBackend {
    async fn run(
        &self,
        ctx: BackendContext,
        progress: ProgressSink,
        pid: PidSlot,
    ) -> BackendOutcome {
        let mut cmd = tokio::process::Command::new(&self.program);
        cmd.args(&self.args)
            .current_dir(&ctx.work_dir)
            .env("AWCP_WORKDIR", &ctx.work_dir)
            .env("AWCP_TASK_DESCRIPTION", &ctx.task.description)
            .env("AWCP_PROMPT", &ctx.task.agent_prompt)
            .env("AWCP_LEASE_MODE", ctx.lease_mode.as_str())
            .env("AWCP_DEADLINE", ctx.deadline.to_rfc3339_opts(chrono::SecondsFormat::Secs, true))
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            // Dropping the future (lease expiry, cancel) must take the
            // child down with it.
            .kill_on_drop(true);

        let mut child = match cmd.spawn() {
            Ok(c) => c,
            Err(e) => return BackendOutcome::failure(format!("backend failed to start: {e}")),
        };
        *pid.lock().expect("pid slot") = child.id();

        let stdout = child.stdout.take().expect("stdout piped");
        let stderr = child.stderr.take().expect("stderr piped");
        let stderr_task = tokio::spawn(async move {
            let mut lines = BufReader::new(stderr).lines();
            let mut last = String::new();
            while let Ok(Some(line)) = lines.next_line().await {
                if !line.trim().is_empty() {
                    last = line;
                }
            }
            last
        });

        let mut summary = String::new();
        let mut highlights = Vec::new();
        let mut lines = BufReader::new(stdout).lines();
        while let Ok(Some(line)) = lines.next_line().await {
            if let Some(rest) = line.strip_prefix("AWCP_SUMMARY:") {
                summary = rest.trim().to_string();
            } else if let Some(rest) = line.strip_prefix("AWCP_HIGHLIGHT:") {
                highlights.push(rest.trim().to_string());
            } else if !line.trim().is_empty() {
                progress.emit(line);
            }
        }

        let status = match child.wait().await {
            Ok(s) => s,
            Err(e) => return BackendOutcome::failure(format!("backend wait failed: {e}")),
        };
        let last_stderr = stderr_task.await.unwrap_or_default();

        if status.success() {
            if summary.is_empty() {
                summary = "task completed".to_string();
            }
            BackendOutcome { success: true, summary, highlights }
        } else {
            let detail = if !summary.is_empty() {
                summary
            } else if !last_stderr.is_empty() {
                last_stderr
            } else {
                format!("backend exited with {status}")
            };
            BackendOutcome { success: false, summary: detail, highlights }
        }
    }
}

/// Posts the assignment to an external HTTP agent and takes the JSON reply
/// `{success, summary, highlights}` as the outcome.
pub struct HttpCallbackBackend {
    pub url: String,
    client: reqwest::Client,
}

impl HttpCallbackBackend {
    pub fn new(url: impl Into<String>) -> Self {
        HttpCallbackBackend { url: url.into(), client: reqwest::Client::new() }
    }
}

#[derive(serde::Serialize)]
#[serde(rename_all = "camelCase")]
struct CallbackRequest<'a> {
    delegation_id: &'a str,
    task: &'a TaskSpec,
    work_dir: &'a std::path::Path,
    lease_mode: &'a str,
    deadline: DateTime<Utc>,
}

#[derive(serde::Deserialize)]
#[serde(rename_all = "camelCase")]
struct CallbackResponse {
    success: bool,
    summary: String,
    #[serde(default)]
    highlights: Vec<String>,
}

#[async_trait]
impl Backend for HttpCallbackBackend {
    async fn run(
        &self,
        ctx: BackendContext,
        _progress: ProgressSink,
        _pid: PidSlot,
    ) -> BackendOutcome {
        let request = CallbackRequest {
            delegation_id: &ctx.delegation_id,
            task: &ctx.task,
            work_dir: &ctx.work_dir,
            lease_mode: ctx.lease_mode.as_str(),
            deadline: ctx.deadline,
        };
        let response = self.client.post(&self.url).json(&request).send().await;
        let response = match response {
            Ok(r) => r,
            Err(e) => return BackendOutcome::failure(format!("callback unreachable: {e}")),
        };
        if !response.status().is_success() {
            return BackendOutcome::failure(format!("callback returned {}", response.status()));
        }
        match response.json::<CallbackResponse>().await {
            Ok(body) => BackendOutcome {
                success: body.success,
                summary: body.summary,
                highlights: body.highlights,
            },
            Err(e) => BackendOutcome::failure(format!("callback reply unreadable: {e}")),
        }
    }
}
