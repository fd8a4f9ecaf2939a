//! The node-local backend: accepts invocations, provisions sandboxes,
//! prefetches inputs into shared memory, serves the data plane, and drives
//! delegated writes to the object store.

mod config;
mod daemon;
mod fault;
mod host;
mod metrics;
mod ratelimit;
mod writeback;

pub use config::*;
pub use daemon::*;
pub use fault::*;
pub use host::*;
pub use metrics::*;
pub use ratelimit::*;
pub use writeback::*;

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("config: {0}")]
    Config(String),
    #[error("unknown function {0:?}")]
    UnknownFunction(String),
    #[error("sandbox: {0}")]
    Sandbox(#[from] crate::sandbox::SandboxError),
    #[error("store: {0}")]
    Store(#[from] crate::store::StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
