//! Git transport: the workspace travels as a delegation-scoped branch
//! (`awcp/<delegationId>`) on a git remote both sides can reach. Snapshots
//! are commits on that branch; the commit id is the integrity reference.
//! Everything shells out to the `git` client, which is exactly what the
//! prerequisite check verifies.

use crate::adapter::{
    CleanupPhase, DelegatorTransport, ExecutorTransport, PhaseGate, ResolvedSnapshot,
};
use crate::archive::extract_archive;
use crate::error::TransportError;
use crate::fsutil;
use crate::manifest::WorkspaceManifest;
use awcp_core::{
    EnvironmentDeclaration, LeaseMode, SnapshotData, SnapshotDescriptor, TransportHandle,
    TransportKind,
};
use async_trait::async_trait;
use chrono::Utc;
use std::path::{Path, PathBuf};
use std::process::Stdio;
use tempfile::TempDir;

/// Commits need an identity; the adapter's is fixed and carries no host
/// information.
const IDENTITY: [&str; 4] = ["-c", "user.name=awcp", "-c", "user.email=awcp@localhost"];

async fn run_git_raw(cwd: Option<&Path>, args: &[&str]) -> Result<Vec<u8>, TransportError> {
    let mut cmd = tokio::process::Command::new("git");
    cmd.args(args)
        // Host and user git configuration must not leak into transport
        // behaviour.
        .env("GIT_CONFIG_GLOBAL", "/dev/null")
        .env("GIT_CONFIG_NOSYSTEM", "1")
        .env("GIT_TERMINAL_PROMPT", "0")
        .stdin(Stdio::null());
    if let Some(cwd) = cwd {
        cmd.current_dir(cwd);
    }
    let out = cmd
        .output()
        .await
        .map_err(|e| TransportError::Unavailable(format!("git client not runnable: {e}")))?;
    if !out.status.success() {
        return Err(TransportError::Command {
            command: format!("git {}", args.join(" ")),
            detail: String::from_utf8_lossy(&out.stderr).trim().to_string(),
        });
    }
    Ok(out.stdout)
}

async fn run_git(cwd: Option<&Path>, args: &[&str]) -> Result<String, TransportError> {
    let stdout = run_git_raw(cwd, args).await?;
    Ok(String::from_utf8_lossy(&stdout).trim().to_string())
}

pub async fn check_git_available() -> Result<(), TransportError> {
    run_git(None, &["--version"]).await.map(|_| ())
}

fn branch_name(delegation_id: &str) -> String {
    format!("awcp/{delegation_id}")
}

/// Environment patterns as git pathspecs, so staging respects the same
/// scope the other transports apply: `:(glob)` for resources,
/// `:(exclude,glob)` for excludes.
fn pathspecs(env: &EnvironmentDeclaration) -> Vec<String> {
    let mut specs: Vec<String> =
        env.resources.iter().map(|p| format!(":(glob){p}")).collect();
    specs.extend(env.excludes.iter().map(|p| format!(":(exclude,glob){p}")));
    specs
}

pub struct GitDelegator {
    remote_url: String,
    delegation_id: String,
    /// Lazily created local mirror used to resolve snapshot commits.
    mirror: Option<TempDir>,
    gate: PhaseGate,
}

impl GitDelegator {
    pub fn new(remote_url: String, delegation_id: String) -> Self {
        GitDelegator { remote_url, delegation_id, mirror: None, gate: PhaseGate::new() }
    }

    fn branch(&self) -> String {
        branch_name(&self.delegation_id)
    }

    async fn mirror_path(&mut self) -> Result<PathBuf, TransportError> {
        if self.mirror.is_none() {
            let dir = tempfile::tempdir().map_err(TransportError::io("git mirror temp"))?;
            run_git(None, &["init", "-q", "--bare", &dir.path().to_string_lossy()]).await?;
            self.mirror = Some(dir);
        }
        Ok(self.mirror.as_ref().expect("just created").path().to_path_buf())
    }
}

#[async_trait]
impl DelegatorTransport for GitDelegator {
    fn kind(&self) -> TransportKind {
        TransportKind::Git
    }

    async fn package(
        &mut self,
        workspace_root: &Path,
        manifest: &WorkspaceManifest,
    ) -> Result<TransportHandle, TransportError> {
        let stage = tempfile::tempdir().map_err(TransportError::io("git stage temp"))?;
        let tree = stage.path().join("tree");
        std::fs::create_dir(&tree).map_err(TransportError::io("git stage tree"))?;
        // Copy exactly the admitted set; the manifest is the authority.
        for entry in &manifest.entries {
            let from = workspace_root.join(&entry.path);
            let to = tree.join(&entry.path);
            if let Some(parent) = to.parent() {
                std::fs::create_dir_all(parent)
                    .map_err(TransportError::io(format!("mkdir {}", parent.display())))?;
            }
            std::fs::copy(&from, &to)
                .map_err(TransportError::io(format!("stage {}", entry.path)))?;
        }

        let branch = self.branch();
        let tree_str = tree.to_string_lossy().to_string();
        run_git(None, &["init", "-q", "-b", &branch, &tree_str]).await?;
        run_git(Some(&tree), &["add", "-A"]).await?;
        let mut commit_args: Vec<&str> = IDENTITY.to_vec();
        let msg = format!("workspace projection {}", self.delegation_id);
        commit_args.extend(["commit", "-q", "--allow-empty", "-m", &msg]);
        run_git(Some(&tree), &commit_args).await?;
        run_git(Some(&tree), &["push", "-q", "--force", &self.remote_url, &format!("HEAD:{branch}")])
            .await?;
        let base_commit = run_git(Some(&tree), &["rev-parse", "HEAD"]).await?;

        Ok(TransportHandle::Git { remote_url: self.remote_url.clone(), branch, base_commit })
    }

    async fn resolve_snapshot(
        &mut self,
        descriptor: &SnapshotDescriptor,
    ) -> Result<ResolvedSnapshot, TransportError> {
        let SnapshotData::Git { remote_url, branch, commit } = &descriptor.data else {
            return Err(TransportError::HandleMismatch {
                handle: "non-git snapshot data".into(),
                adapter: "git".into(),
            });
        };
        // Only this session's remote is trusted; a descriptor naming some
        // other remote would make the delegator fetch attacker-chosen
        // content.
        if *remote_url != self.remote_url {
            return Err(TransportError::IntegrityMismatch(format!(
                "snapshot {} names foreign remote {remote_url}",
                descriptor.snapshot_id
            )));
        }
        let mirror = self.mirror_path().await?;
        run_git(Some(&mirror), &["fetch", "-q", "--force", &self.remote_url, branch]).await?;
        // The commit must exist after fetching the delegation branch.
        let probe = format!("{commit}^{{commit}}");
        run_git(Some(&mirror), &["cat-file", "-e", &probe]).await.map_err(|_| {
            TransportError::IntegrityMismatch(format!(
                "snapshot {}: commit {commit} is not on branch {branch}",
                descriptor.snapshot_id
            ))
        })?;

        let zip_bytes =
            run_git_raw(Some(&mirror), &["archive", "--format=zip", commit]).await?;
        let dir = tempfile::tempdir().map_err(TransportError::io("snapshot temp dir"))?;
        extract_archive(&zip_bytes, dir.path())?;
        Ok(ResolvedSnapshot::new(dir))
    }

    async fn detach(&mut self) -> Result<(), TransportError> {
        if self.gate.begin_detach() {
            self.mirror = None;
        }
        Ok(())
    }

    async fn release(&mut self) -> Result<(), TransportError> {
        if self.gate.begin_release()? {
            let branch = self.branch();
            let result =
                run_git(None, &["push", "-q", &self.remote_url, "--delete", &branch]).await;
            if let Err(err) = result {
                // Idempotence across crashes: a branch that is already gone
                // is a completed release, anything else is real.
                let listing =
                    run_git(None, &["ls-remote", "--heads", &self.remote_url, &branch]).await?;
                if !listing.is_empty() {
                    return Err(err);
                }
            }
        }
        Ok(())
    }

    fn phase(&self) -> CleanupPhase {
        self.gate.phase()
    }
}

pub struct GitExecutor {
    environment: EnvironmentDeclaration,
    temp_base: Option<PathBuf>,
    git_dir: Option<TempDir>,
    remote_url: Option<String>,
    branch: Option<String>,
    gate: PhaseGate,
}

impl GitExecutor {
    pub fn new(temp_base: Option<PathBuf>) -> Self {
        GitExecutor {
            environment: EnvironmentDeclaration::everything(),
            temp_base,
            git_dir: None,
            remote_url: None,
            branch: None,
            gate: PhaseGate::new(),
        }
    }

    /// Scope for staging snapshot commits. Falls back to everything.
    pub fn with_environment(mut self, env: EnvironmentDeclaration) -> Self {
        self.environment = env;
        self
    }
}

#[async_trait]
impl ExecutorTransport for GitExecutor {
    fn kind(&self) -> TransportKind {
        TransportKind::Git
    }

    async fn provision(
        &mut self,
        handle: &TransportHandle,
        work_dir: &Path,
        mode: LeaseMode,
    ) -> Result<(), TransportError> {
        let TransportHandle::Git { remote_url, branch, base_commit } = handle else {
            return Err(TransportError::HandleMismatch {
                handle: handle.kind().to_string(),
                adapter: "git".into(),
            });
        };
        check_git_available().await?;

        let holder = match &self.temp_base {
            Some(base) => TempDir::new_in(base),
            None => tempfile::tempdir(),
        }
        .map_err(TransportError::io("git dir temp"))?;
        let git_dir = holder.path().join("git");

        run_git(
            None,
            &[
                "clone",
                "-q",
                "--branch",
                branch,
                "--single-branch",
                &format!("--separate-git-dir={}", git_dir.to_string_lossy()),
                remote_url,
                &work_dir.to_string_lossy(),
            ],
        )
        .await?;

        let head = run_git(Some(work_dir), &["rev-parse", "HEAD"]).await?;
        if head != *base_commit {
            // A different tip than the handle promised: the remote moved or
            // was rewritten between packaging and provisioning.
            fsutil::remove_tree(work_dir)?;
            std::fs::create_dir_all(work_dir).map_err(TransportError::io("recreate workDir"))?;
            return Err(TransportError::IntegrityMismatch(format!(
                "branch {branch} is at {head}, START promised {base_commit}"
            )));
        }

        if mode == LeaseMode::ReadOnly {
            fsutil::strip_write_bits(work_dir)?;
        }
        self.git_dir = Some(holder);
        self.remote_url = Some(remote_url.clone());
        self.branch = Some(branch.clone());
        Ok(())
    }

    async fn capture_snapshot(
        &mut self,
        work_dir: &Path,
        snapshot_id: &str,
        recommended: bool,
    ) -> Result<SnapshotDescriptor, TransportError> {
        let (Some(remote_url), Some(branch)) = (self.remote_url.clone(), self.branch.clone())
        else {
            return Err(TransportError::Unavailable(
                "capture before provision on git transport".into(),
            ));
        };

        let mut add_args: Vec<String> = vec!["add".into(), "-A".into(), "--".into()];
        add_args.extend(pathspecs(&self.environment));
        let add_refs: Vec<&str> = add_args.iter().map(String::as_str).collect();
        run_git(Some(work_dir), &add_refs).await?;

        let mut commit_args: Vec<&str> = IDENTITY.to_vec();
        let msg = format!("snapshot {snapshot_id}");
        commit_args.extend(["commit", "-q", "--allow-empty", "-m", &msg]);
        run_git(Some(work_dir), &commit_args).await?;
        let commit = run_git(Some(work_dir), &["rev-parse", "HEAD"]).await?;
        run_git(Some(work_dir), &["push", "-q", &remote_url, &format!("HEAD:{branch}")]).await?;

        Ok(SnapshotDescriptor {
            snapshot_id: snapshot_id.to_string(),
            data: SnapshotData::Git { remote_url, branch, commit: commit.clone() },
            sha256: commit,
            recommended,
            captured_at: Utc::now(),
        })
    }

    async fn detach(&mut self, work_dir: &Path) -> Result<(), TransportError> {
        if self.gate.begin_detach() {
            // Disconnect the VCS channel: drop the .git pointer so the tree
            // is plain files, then reclaim the real git dir.
            let pointer = work_dir.join(".git");
            if pointer.exists() {
                use std::os::unix::fs::PermissionsExt;
                let _ = std::fs::set_permissions(
                    work_dir,
                    std::fs::Permissions::from_mode(0o755),
                );
                std::fs::remove_file(&pointer)
                    .map_err(TransportError::io("remove .git pointer"))?;
            }
            self.git_dir = None;
            self.remote_url = None;
            self.branch = None;
        }
        Ok(())
    }

    async fn release(&mut self, work_dir: &Path) -> Result<(), TransportError> {
        if self.gate.begin_release()? {
            fsutil::remove_tree(work_dir)?;
        }
        Ok(())
    }

    fn phase(&self) -> CleanupPhase {
        self.gate.phase()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    async fn bare_remote() -> (tempfile::TempDir, String) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("share.git");
        run_git(None, &["init", "-q", "--bare", &path.to_string_lossy()]).await.unwrap();
        (dir, path.to_string_lossy().to_string())
    }

    fn sample_workspace() -> (tempfile::TempDir, WorkspaceManifest) {
        let ws = tempfile::tempdir().unwrap();
        fs::create_dir_all(ws.path().join("src")).unwrap();
        fs::write(ws.path().join("src/main.rs"), "fn main() {}\n").unwrap();
        fs::write(ws.path().join("Cargo.toml"), "[package]\nname=\"x\"\n").unwrap();
        let manifest =
            WorkspaceManifest::capture(ws.path(), &PatternSet::everything(), false).unwrap();
        (ws, manifest)
    }

    #[tokio::test]
    async fn prerequisite_check_passes_where_git_exists() {
        check_git_available().await.unwrap();
    }

    #[tokio::test]
    async fn branch_round_trip_with_snapshot_commits() {
        let (_keep, remote) = bare_remote().await;
        let (ws, manifest) = sample_workspace();

        let mut delegator = GitDelegator::new(remote.clone(), "d-git-1".into());
        let handle = delegator.package(ws.path(), &manifest).await.unwrap();
        let TransportHandle::Git { branch, base_commit, .. } = &handle else { unreachable!() };
        assert_eq!(branch, "awcp/d-git-1");

        // The branch exists on the remote and points at the base commit.
        let tip = run_git(None, &["ls-remote", &remote, branch]).await.unwrap();
        assert!(tip.starts_with(base_commit.as_str()));

        let work = tempfile::tempdir().unwrap();
        let mut executor = GitExecutor::new(None);
        executor.provision(&handle, work.path(), LeaseMode::ReadWrite).await.unwrap();
        assert_eq!(
            fs::read_to_string(work.path().join("src/main.rs")).unwrap(),
            "fn main() {}\n"
        );

        // Work happens, a snapshot travels back as a commit.
        fs::write(work.path().join("src/generated.rs"), "pub const OK: bool = true;\n").unwrap();
        fs::remove_file(work.path().join("Cargo.toml")).unwrap();
        let descriptor = executor.capture_snapshot(work.path(), "s-1", true).await.unwrap();
        assert_eq!(descriptor.sha256.len(), 40, "commit id is the integrity reference");

        let resolved = delegator.resolve_snapshot(&descriptor).await.unwrap();
        assert!(resolved.root().join("src/generated.rs").exists());
        assert!(!resolved.root().join("Cargo.toml").exists());

        // Unmodified capture resolves back to the first snapshot's tree.
        let again = executor.capture_snapshot(work.path(), "s-2", false).await.unwrap();
        let resolved_again = delegator.resolve_snapshot(&again).await.unwrap();
        let a = WorkspaceManifest::capture(resolved.root(), &PatternSet::everything(), false)
            .unwrap();
        let b =
            WorkspaceManifest::capture(resolved_again.root(), &PatternSet::everything(), false)
                .unwrap();
        assert_eq!(a, b);

        // Cleanup: detach leaves plain files, release deletes the branch.
        executor.detach(work.path()).await.unwrap();
        assert!(!work.path().join(".git").exists());
        executor.release(work.path()).await.unwrap();
        delegator.detach().await.unwrap();
        delegator.release().await.unwrap();
        let listing = run_git(None, &["ls-remote", "--heads", &remote, branch]).await.unwrap();
        assert!(listing.is_empty(), "release must delete the delegation branch");
        // Releasing again is a no-op.
        delegator.release().await.unwrap();
    }

    #[tokio::test]
    async fn moved_branch_tip_fails_provision() {
        let (_keep, remote) = bare_remote().await;
        let (ws, manifest) = sample_workspace();

        let mut delegator = GitDelegator::new(remote.clone(), "d-git-2".into());
        let handle = delegator.package(ws.path(), &manifest).await.unwrap();

        // Someone rewrites the branch after packaging.
        fs::write(ws.path().join("sneak.txt"), "extra").unwrap();
        let manifest2 =
            WorkspaceManifest::capture(ws.path(), &PatternSet::everything(), false).unwrap();
        let mut delegator2 = GitDelegator::new(remote.clone(), "d-git-2".into());
        let _ = delegator2.package(ws.path(), &manifest2).await.unwrap();

        let work = tempfile::tempdir().unwrap();
        let mut executor = GitExecutor::new(None);
        let err = executor
            .provision(&handle, work.path(), LeaseMode::ReadWrite)
            .await
            .unwrap_err();
        assert!(matches!(err, TransportError::IntegrityMismatch(_)));
    }

    #[tokio::test]
    async fn foreign_remotes_in_descriptors_are_refused() {
        let (_keep, remote) = bare_remote().await;
        let mut delegator = GitDelegator::new(remote, "d-git-3".into());
        let descriptor = SnapshotDescriptor {
            snapshot_id: "s-x".into(),
            data: SnapshotData::Git {
                remote_url: "/somewhere/else.git".into(),
                branch: "awcp/d-git-3".into(),
                commit: "deadbeef".into(),
            },
            sha256: "deadbeef".into(),
            recommended: false,
            captured_at: Utc::now(),
        };
        let err = delegator.resolve_snapshot(&descriptor).await.unwrap_err();
        assert!(matches!(err, TransportError::IntegrityMismatch(_)));
    }

    #[tokio::test]
    async fn snapshot_staging_respects_excludes() {
        let (_keep, remote) = bare_remote().await;
        let (ws, manifest) = sample_workspace();

        let mut delegator = GitDelegator::new(remote.clone(), "d-git-4".into());
        let handle = delegator.package(ws.path(), &manifest).await.unwrap();

        let env = EnvironmentDeclaration {
            resources: vec!["**".into()],
            excludes: vec!["**/*.log".into()],
        };
        let work = tempfile::tempdir().unwrap();
        let mut executor = GitExecutor::new(None)
            .with_environment(env);
        executor.provision(&handle, work.path(), LeaseMode::ReadWrite).await.unwrap();

        fs::write(work.path().join("out.log"), "scratch").unwrap();
        fs::write(work.path().join("result.txt"), "keep").unwrap();
        let descriptor = executor.capture_snapshot(work.path(), "s-1", true).await.unwrap();

        let resolved = delegator.resolve_snapshot(&descriptor).await.unwrap();
        assert!(resolved.root().join("result.txt").exists());
        assert!(!resolved.root().join("out.log").exists(), "excluded file travelled");
    }
}
