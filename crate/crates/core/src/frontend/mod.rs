//! The in-sandbox client library.
//!
//! A [`ClientSession`] connects to the backend's control channel, maps the
//! sandbox's shared region, and turns object-storage calls into control
//! messages. Inputs come back either as a [`PayloadView`] straight over the
//! region or as a stream pulled from the region's ring; the backend picks.
//! [`ObjectClient`] is the SDK-shaped surface handlers are written against,
//! implemented both by the session and by a [`DirectClient`] that talks to
//! the store itself.

mod body;
mod sdk;
mod session;

pub use body::{Body, PayloadView, RingStream};
pub use sdk::{DirectClient, ObjectClient, PutObjectOutput, SdkError, SessionClient};
pub use session::{AttachOptions, ClientSession, CopyCounters, Invocation, PutOutcome};

use thiserror::Error;

use crate::proto::{ObjectRef, ProtoError};
use crate::shmem::ShmemError;

#[derive(Debug, Error)]
pub enum FrontendError {
    #[error("attach failed: {0}")]
    Attach(String),
    #[error("control channel: {0}")]
    Transport(String),
    #[error("object {0} not found")]
    NotFound(ObjectRef),
    #[error("store error for {object}: {status:?}")]
    Store {
        object: ObjectRef,
        status: crate::proto::Status,
    },
    #[error("illegal state: {0}")]
    IllegalState(&'static str),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("response payload of {0} bytes exceeds 64 KiB")]
    PayloadTooLarge(usize),
    #[error("region: {0}")]
    Region(#[from] ShmemError),
}

impl From<ProtoError> for FrontendError {
    fn from(e: ProtoError) -> Self {
        match e {
            ProtoError::Io(e) => FrontendError::Transport(e.to_string()),
            ProtoError::TruncatedFrame => FrontendError::Transport("truncated frame".into()),
            other => FrontendError::Protocol(other.to_string()),
        }
    }
}
