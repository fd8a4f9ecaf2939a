use std::net::SocketAddr;
use std::sync::Arc;

use thiserror::Error;

use crate::backend::TokenBucket;
use crate::proto::{ObjectRef, Status};
use crate::store::{BlockingStoreClient, StoreError};

use super::body::Body;
use super::session::{ClientSession, PutOutcome};
use super::FrontendError;

/// Errors in the shape a cloud SDK reports them.
#[derive(Debug, Error)]
pub enum SdkError {
    #[error("NoSuchKey: {bucket}/{key}")]
    NoSuchKey { bucket: String, key: String },
    #[error("InvalidRequest: {0}")]
    InvalidRequest(String),
    #[error("ServiceError: {0}")]
    Service(String),
}

impl SdkError {
    /// The control-plane status a handler failure maps to.
    pub fn status(&self) -> Status {
        match self {
            SdkError::NoSuchKey { .. } => Status::NotFound,
            SdkError::InvalidRequest(_) => Status::HandlerError,
            SdkError::Service(_) => Status::StoreFailed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PutObjectOutput {
    /// Store version; absent when the platform delegated the write.
    pub version_id: Option<u64>,
}

/// The object-storage calls a handler makes.
pub trait ObjectClient {
    fn get_object(&mut self, bucket: &str, key: &str) -> Result<Body, SdkError>;
    fn put_object(&mut self, bucket: &str, key: &str, body: &[u8]) -> Result<PutObjectOutput, SdkError>;
}

fn object(bucket: &str, key: &str) -> Result<ObjectRef, SdkError> {
    ObjectRef::new(bucket, key).map_err(|e| SdkError::InvalidRequest(e.to_string()))
}

/// [`ObjectClient`] over a frontend session. Writes are delegated to the
/// backend when the platform opted the invocation in.
pub struct SessionClient<'a> {
    session: &'a mut ClientSession,
    delegate: bool,
}

impl<'a> SessionClient<'a> {
    pub fn new(session: &'a mut ClientSession, delegate: bool) -> Self {
        SessionClient { session, delegate }
    }
}

fn frontend_err(e: FrontendError) -> SdkError {
    match e {
        FrontendError::NotFound(o) => SdkError::NoSuchKey {
            bucket: o.bucket().to_string(),
            key: o.key().to_string(),
        },
        other => SdkError::Service(other.to_string()),
    }
}

impl ObjectClient for SessionClient<'_> {
    fn get_object(&mut self, bucket: &str, key: &str) -> Result<Body, SdkError> {
        let o = object(bucket, key)?;
        self.session.get_object(&o).map_err(frontend_err)
    }

    fn put_object(&mut self, bucket: &str, key: &str, body: &[u8]) -> Result<PutObjectOutput, SdkError> {
        let o = object(bucket, key)?;
        match self.session.put_object(&o, body, self.delegate).map_err(frontend_err)? {
            PutOutcome::Stored { version } => Ok(PutObjectOutput { version_id: Some(version) }),
            PutOutcome::Delegated => Ok(PutObjectOutput { version_id: None }),
        }
    }
}

/// [`ObjectClient`] that talks to the store over its own connection, as a
/// sandbox with an embedded SDK would.
pub struct DirectClient {
    store: BlockingStoreClient,
    limiter: Option<Arc<TokenBucket>>,
}

impl DirectClient {
    pub fn new(store: SocketAddr, limiter: Option<Arc<TokenBucket>>) -> Self {
        DirectClient {
            store: BlockingStoreClient::new(store),
            limiter,
        }
    }

    fn pace(&self, n: u64) {
        if let Some(l) = &self.limiter {
            l.acquire_blocking(n);
        }
    }
}

fn store_err(e: StoreError) -> SdkError {
    match e {
        StoreError::NotFound(o) => SdkError::NoSuchKey {
            bucket: o.bucket().to_string(),
            key: o.key().to_string(),
        },
        other => SdkError::Service(other.to_string()),
    }
}

impl ObjectClient for DirectClient {
    fn get_object(&mut self, bucket: &str, key: &str) -> Result<Body, SdkError> {
        let o = object(bucket, key)?;
        let data = self.store.get(&o).map_err(store_err)?;
        self.pace(data.len() as u64);
        Ok(Body::owned(data))
    }

    fn put_object(&mut self, bucket: &str, key: &str, body: &[u8]) -> Result<PutObjectOutput, SdkError> {
        let o = object(bucket, key)?;
        self.pace(body.len() as u64);
        let version = self.store.put(&o, body).map_err(store_err)?;
        Ok(PutObjectOutput { version_id: Some(version) })
    }
}
