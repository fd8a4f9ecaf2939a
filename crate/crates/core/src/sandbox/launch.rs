use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Mode, SandboxError};

/// Startup parameters handed to a sandbox.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SandboxParams {
    pub sandbox_id: u64,
    pub control: PathBuf,
    /// Absent in coupled mode, which has no shared region.
    pub region: Option<PathBuf>,
    pub function: String,
    pub mode: Mode,
    /// Store address for coupled sandboxes.
    pub store: Option<SocketAddr>,
    /// Per-client share of the function's rate, for coupled sandboxes.
    pub rate_limit_bps: u64,
}

impl SandboxParams {
    /// Command-line form understood by the `nexus-sandbox` binary.
    pub fn to_args(&self) -> Vec<String> {
        let mut args = vec![
            "--sandbox-id".into(),
            self.sandbox_id.to_string(),
            "--control".into(),
            self.control.display().to_string(),
            "--function".into(),
            self.function.clone(),
            "--mode".into(),
            self.mode.to_string(),
            "--rate-limit-bps".into(),
            self.rate_limit_bps.to_string(),
        ];
        if let Some(r) = &self.region {
            args.push("--region".into());
            args.push(r.display().to_string());
        }
        if let Some(s) = &self.store {
            args.push("--store".into());
            args.push(s.to_string());
        }
        args
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LauncherKind {
    /// Runs the sandbox runtime on a thread of the backend process.
    #[default]
    Thread,
    /// Spawns the `nexus-sandbox` binary. Without `exe`, it is looked up next
    /// to the running executable, then on PATH.
    Process {
        #[serde(default)]
        exe: Option<PathBuf>,
    },
}

pub enum LaunchHandle {
    Thread(std::thread::JoinHandle<()>),
    Process(tokio::process::Child),
}

impl LaunchHandle {
    /// Stops a process sandbox. Thread sandboxes exit by themselves once
    /// their control channel closes.
    pub fn kill(&mut self) {
        if let LaunchHandle::Process(child) = self {
            let _ = child.start_kill();
        }
    }
}

fn default_exe() -> PathBuf {
    if let Ok(me) = std::env::current_exe() {
        for dir in me.ancestors().skip(1).take(2) {
            let cand = dir.join("nexus-sandbox");
            if cand.is_file() {
                return cand;
            }
        }
    }
    PathBuf::from("nexus-sandbox")
}

/// Starts a sandbox. Must be called inside a tokio runtime for process
/// launches.
pub fn launch(kind: &LauncherKind, params: SandboxParams) -> Result<LaunchHandle, SandboxError> {
    match kind {
        LauncherKind::Thread => {
            let name = format!("sandbox-{}", params.sandbox_id);
            let h = std::thread::Builder::new()
                .name(name)
                .spawn(move || {
                    if let Err(e) = super::run_sandbox(&params) {
                        tracing::debug!("sandbox {} exited: {e}", params.sandbox_id);
                    }
                })
                .map_err(|e| SandboxError::Spawn(e.to_string()))?;
            Ok(LaunchHandle::Thread(h))
        }
        LauncherKind::Process { exe } => {
            let exe = exe.clone().unwrap_or_else(default_exe);
            let mut cmd = tokio::process::Command::new(&exe);
            cmd.args(params.to_args())
                .env("NEXUS_CONTROL", &params.control)
                .stdin(std::process::Stdio::null())
                .kill_on_drop(true);
            if let Some(r) = &params.region {
                cmd.env("NEXUS_REGION", r);
            }
            let child = cmd.spawn().map_err(|e| SandboxError::Spawn(format!("{}: {e}", exe.display())))?;
            Ok(LaunchHandle::Process(child))
        }
    }
}

pub(super) fn control_path(dir: &Path, sandbox_id: u64) -> PathBuf {
    dir.join(format!("nexus-ctl-{sandbox_id}.sock"))
}
