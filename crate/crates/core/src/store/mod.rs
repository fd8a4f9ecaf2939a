//! S3-like remote storage stand-in: an in-memory object map served over a
//! small length-prefixed TCP protocol, with a latency + bandwidth cost model
//! applied to every response and injectable PUT failures.

mod client;
mod server;
pub mod wire;

pub use client::{BlockingStoreClient, GetStream, StoreClient};
pub use server::{LogEntry, StoreOp, StoreProfile, StoreServer, StoreState, StoredObject, serve};

use thiserror::Error;

use crate::proto::ObjectRef;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("object {0} not found")]
    NotFound(ObjectRef),
    #[error("injected failure writing {0}")]
    InjectedFailure(ObjectRef),
    #[error("store protocol: {0}")]
    Protocol(String),
    #[error("store connection: {0}")]
    Io(#[from] std::io::Error),
}
