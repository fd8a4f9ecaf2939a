use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Mode, SandboxError};

/// Linear snapshot-restore cost: a fixed part plus a per-page part for the
/// guest working set. Offloaded sandboxes carry no storage stack, so their
/// working set is smaller by `offload_ws_reduction`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestoreModel {
    pub base_us: u64,
    pub per_page_us: u64,
    pub working_set_pages_coupled: u64,
    pub offload_ws_reduction: f64,
}

impl Default for RestoreModel {
    fn default() -> Self {
        RestoreModel {
            base_us: 50_000,
            per_page_us: 10,
            working_set_pages_coupled: 10_000,
            offload_ws_reduction: 0.31,
        }
    }
}

impl RestoreModel {
    pub fn validate(&self) -> Result<(), SandboxError> {
        if !(0.0..1.0).contains(&self.offload_ws_reduction) {
            return Err(SandboxError::BadRestoreModel(format!(
                "offload_ws_reduction must be in [0, 1), got {}",
                self.offload_ws_reduction
            )));
        }
        Ok(())
    }

    /// Working-set pages restored for a sandbox in `mode`.
    pub fn pages(&self, mode: Mode) -> u64 {
        match mode {
            Mode::Coupled => self.working_set_pages_coupled,
            _ => (self.working_set_pages_coupled as f64 * (1.0 - self.offload_ws_reduction)).round() as u64,
        }
    }

    pub fn delay(&self, mode: Mode) -> Duration {
        Duration::from_micros(self.base_us + self.per_page_us * self.pages(mode))
    }
}
