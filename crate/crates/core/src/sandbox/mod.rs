//! Process and thread stand-ins for microVM sandboxes: the lifecycle state
//! machine, the snapshot-restore cost model, launchers, the in-sandbox
//! runtime with its synthetic handler, and the manager that provisions,
//! pools, and releases sandboxes.

mod handler;
mod launch;
mod manager;
mod restore;

pub use handler::{
    run_sandbox, spin_for, synthetic_bytes, synthetic_handler, HandlerError, HandlerPayload, HandlerReport, InputDigest,
    OutputDigest,
};
pub use launch::{launch, LaunchHandle, LauncherKind, SandboxParams};
pub use manager::{
    CapturedFrame, ColdStart, ControlConn, Direction, FrameCapture, ManagerConfig, Provisioned, Sandbox, SandboxManager,
};
pub use restore::RestoreModel;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// How a sandbox reaches storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// The sandbox carries its own storage client; the lifecycle is strictly
    /// restore, fetch, compute, write.
    Coupled,
    /// Storage calls are remoted to the backend; writes are synchronous.
    Offloaded,
    /// As `Offloaded`, with writes delegated and the sandbox released early.
    OffloadedAsync,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Coupled, Mode::Offloaded, Mode::OffloadedAsync];

    pub fn is_offloaded(self) -> bool {
        self != Mode::Coupled
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Coupled => "coupled",
            Mode::Offloaded => "offloaded",
            Mode::OffloadedAsync => "offloaded-async",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "coupled" => Ok(Mode::Coupled),
            "offloaded" => Ok(Mode::Offloaded),
            "offloaded-async" => Ok(Mode::OffloadedAsync),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SandboxState {
    Restoring,
    Ready,
    Busy,
    Draining,
    Released,
}

/// Whether `from -> to` is an allowed lifecycle step. Besides the main path,
/// an idle sandbox may be drained for eviction and a sandbox that never came
/// up goes straight to Released.
pub fn legal_transition(from: SandboxState, to: SandboxState) -> bool {
    use SandboxState::*;
    matches!(
        (from, to),
        (Restoring, Ready) | (Restoring, Released) | (Ready, Busy) | (Busy, Ready) | (Busy, Draining) | (Ready, Draining) | (Draining, Released)
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SandboxRecord {
    pub sandbox_id: u64,
    pub function: String,
    pub state: SandboxState,
    pub region_id: u64,
    pub control_channel: PathBuf,
    /// Microseconds on the manager's clock.
    pub restored_at: Option<u64>,
    pub released_at: Option<u64>,
    pub history: Vec<(SandboxState, u64)>,
}

impl SandboxRecord {
    pub fn new(sandbox_id: u64, function: &str, region_id: u64, control_channel: PathBuf, now_us: u64) -> Self {
        SandboxRecord {
            sandbox_id,
            function: function.to_string(),
            state: SandboxState::Restoring,
            region_id,
            control_channel,
            restored_at: None,
            released_at: None,
            history: vec![(SandboxState::Restoring, now_us)],
        }
    }

    pub fn transition(&mut self, to: SandboxState, now_us: u64) -> Result<(), SandboxError> {
        if !legal_transition(self.state, to) {
            return Err(SandboxError::IllegalState {
                sandbox_id: self.sandbox_id,
                from: self.state,
                to,
            });
        }
        self.state = to;
        self.history.push((to, now_us));
        match to {
            SandboxState::Ready if self.restored_at.is_none() => self.restored_at = Some(now_us),
            SandboxState::Released => self.released_at = Some(now_us),
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("sandbox {sandbox_id}: illegal transition {from:?} -> {to:?}")]
    IllegalState {
        sandbox_id: u64,
        from: SandboxState,
        to: SandboxState,
    },
    #[error("failed to start sandbox: {0}")]
    Spawn(String),
    #[error("sandbox {0} did not connect in time")]
    ConnectTimeout(u64),
    #[error("bad restore model: {0}")]
    BadRestoreModel(String),
    #[error("region: {0}")]
    Region(#[from] crate::shmem::ShmemError),
    #[error("frontend: {0}")]
    Frontend(#[from] crate::frontend::FrontendError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
