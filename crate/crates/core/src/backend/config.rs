//! Backend configuration file. CONFIG.md documents every key.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::sandbox::{LauncherKind, RestoreModel};
use crate::shmem::{DEFAULT_REGION_CAP, DEFAULT_RING_CAPACITY};

use super::BackendError;

pub const DEFAULT_RATE_LIMIT_BPS: u64 = 600_000_000;

fn default_rate() -> u64 {
    DEFAULT_RATE_LIMIT_BPS
}

fn default_clients() -> Vec<String> {
    vec!["s3".to_string()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionConfig {
    pub name: String,
    #[serde(default = "default_rate")]
    pub rate_limit_bps: u64,
    #[serde(default)]
    pub credentials_token: String,
    /// SDK clients the function uses. The first one carries object-storage
    /// traffic; each gets an equal share of `rate_limit_bps`.
    #[serde(default = "default_clients")]
    pub clients: Vec<String>,
    /// Overrides the backend-wide restore model.
    #[serde(default)]
    pub restore: Option<RestoreModel>,
}

impl FunctionConfig {
    pub fn new(name: &str) -> Self {
        FunctionConfig {
            name: name.to_string(),
            rate_limit_bps: DEFAULT_RATE_LIMIT_BPS,
            credentials_token: String::new(),
            clients: default_clients(),
            restore: None,
        }
    }

    pub fn storage_client(&self) -> &str {
        &self.clients[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    /// Idle sandboxes kept per function.
    pub warm_per_function: usize,
    /// Restored working-set pages the node can hold at once. Unlimited when
    /// absent.
    pub node_memory_pages: Option<u64>,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            warm_per_function: 4,
            node_memory_pages: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShmemConfig {
    /// Power of two.
    pub ring_capacity: u64,
    /// Per-sandbox region cap.
    pub region_cap: u64,
    /// Smallest slot area a region is created with.
    pub min_slot_bytes: u64,
    /// Slot space reserved for outputs beyond the hinted inputs.
    pub output_reserve_bytes: u64,
    /// Checksum every filled slot.
    pub checksum_slots: bool,
}

impl Default for ShmemConfig {
    fn default() -> Self {
        ShmemConfig {
            ring_capacity: DEFAULT_RING_CAPACITY,
            region_cap: DEFAULT_REGION_CAP,
            min_slot_bytes: 16 * 1024 * 1024,
            output_reserve_bytes: 4 * 1024 * 1024,
            checksum_slots: cfg!(debug_assertions),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WritebackConfig {
    /// Retries after the first failed attempt of a delegated write.
    pub retries: u32,
    /// First retry delay; doubles per retry.
    pub backoff_ms: u64,
}

impl Default for WritebackConfig {
    fn default() -> Self {
        WritebackConfig {
            retries: 2,
            backoff_ms: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub functions: Vec<FunctionConfig>,
    pub restore: RestoreModel,
    pub pool: PoolConfig,
    pub shmem: ShmemConfig,
    pub writeback: WritebackConfig,
    /// Largest object a hint may declare.
    pub max_object_bytes: u64,
    pub launcher: LauncherKind,
    /// How long a new sandbox may take to connect its control channel.
    pub connect_timeout_ms: u64,
    /// How long to wait for a frontend to reconnect a broken channel.
    pub reconnect_grace_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            functions: Vec::new(),
            restore: RestoreModel::default(),
            pool: PoolConfig::default(),
            shmem: ShmemConfig::default(),
            writeback: WritebackConfig::default(),
            max_object_bytes: 1 << 30,
            launcher: LauncherKind::Thread,
            connect_timeout_ms: 10_000,
            reconnect_grace_ms: 500,
        }
    }
}

impl BackendConfig {
    pub fn from_json(bytes: &[u8]) -> Result<BackendConfig, BackendError> {
        let cfg: BackendConfig = serde_json::from_slice(bytes).map_err(|e| BackendError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<BackendConfig, BackendError> {
        let bytes = std::fs::read(path).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&bytes)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: String| Err(BackendError::Config(m));
        let mut seen = std::collections::HashSet::new();
        for f in &self.functions {
            if f.name.is_empty() {
                return bad("function name must not be empty".into());
            }
            if !seen.insert(&f.name) {
                return bad(format!("function {:?} defined twice", f.name));
            }
            if f.rate_limit_bps == 0 {
                return bad(format!("{}: rate_limit_bps must be positive", f.name));
            }
            if f.clients.is_empty() {
                return bad(format!("{}: clients must not be empty", f.name));
            }
            if let Some(r) = &f.restore {
                r.validate().map_err(|e| BackendError::Config(format!("{}: {e}", f.name)))?;
            }
        }
        self.restore.validate().map_err(|e| BackendError::Config(e.to_string()))?;
        if !self.shmem.ring_capacity.is_power_of_two() {
            return bad("shmem.ring_capacity must be a power of two".into());
        }
        if self.pool.warm_per_function == usize::MAX {
            return bad("pool.warm_per_function out of range".into());
        }
        Ok(())
    }

    pub fn function(&self, name: &str) -> Option<&FunctionConfig> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn restore_for(&self, f: &FunctionConfig) -> RestoreModel {
        f.restore.unwrap_or(self.restore)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_in() {
        let cfg = BackendConfig::from_json(br#"{"functions":[{"name":"aes","credentials_token":"t"}]}"#).unwrap();
        let f = cfg.function("aes").unwrap();
        assert_eq!(f.rate_limit_bps, 600_000_000);
        assert_eq!(f.clients, vec!["s3"]);
        assert_eq!(cfg.pool.warm_per_function, 4);
        assert_eq!(cfg.shmem.ring_capacity, 4 << 20);
        assert_eq!(cfg.shmem.region_cap, 256 << 20);
        assert_eq!(cfg.writeback.retries, 2);
        assert_eq!(cfg.restore_for(f).offload_ws_reduction, 0.31);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(BackendConfig::from_json(br#"{"functions":[{"name":"a","rate_limit_bps":0}]}"#).is_err());
        assert!(BackendConfig::from_json(br#"{"functions":[{"name":"a"},{"name":"a"}]}"#).is_err());
        assert!(BackendConfig::from_json(br#"{"functions":[{"name":"a","clients":[]}]}"#).is_err());
        assert!(BackendConfig::from_json(br#"{"shmem":{"ring_capacity":1000}}"#).is_err());
        assert!(BackendConfig::from_json(br#"{"restore":{"offload_ws_reduction":1.5}}"#).is_err());
        assert!(BackendConfig::from_json(br#"{"bogus":1}"#).is_err());
    }

    #[test]
    fn round_trips() {
        let mut cfg = BackendConfig::default();
        cfg.functions.push(FunctionConfig::new("x"));
        cfg.launcher = LauncherKind::Process { exe: None };
        assert_eq!(BackendConfig::from_json(cfg.to_json().as_bytes()).unwrap(), cfg);
    }
}
