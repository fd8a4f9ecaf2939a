//! Delegated writes and the response they gate.

use std::sync::Arc;

use parking_lot::Mutex;
use serde::Serialize;
use tokio::sync::Notify;

use crate::proto::{IdempotencyKey, InvocationId, ObjectRef};
use crate::shmem::SlotGrant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum WriteState {
    Queued,
    InFlight,
    Acked,
    Failed,
}

/// A write the backend drives on the sandbox's behalf after acknowledging
/// it as delegated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingWrite {
    pub invocation_id: InvocationId,
    pub idempotency_key: IdempotencyKey,
    pub object: ObjectRef,
    /// Where the payload sat in the region when the write was delegated.
    pub grant: SlotGrant,
    pub state: WriteState,
    pub attempts: u32,
    pub version: Option<u64>,
    pub acked_at_us: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BufferOutcome {
    Held,
    ReleasedOk,
    ReleasedError,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Release {
    pub outcome: BufferOutcome,
    /// Latest store acknowledgment among the invocation's writes.
    pub last_ack_us: Option<u64>,
    pub error: Option<String>,
}

#[derive(Debug)]
struct BufState {
    writes: Vec<PendingWrite>,
    pending: u32,
    failed: Option<String>,
    outcome: BufferOutcome,
}

/// Holds an invocation's final response until every delegated write is
/// acknowledged, or until one of them fails.
#[derive(Debug)]
pub struct ResponseBuffer {
    pub invocation_id: InvocationId,
    state: Mutex<BufState>,
    notify: Notify,
}

impl ResponseBuffer {
    pub fn new(invocation_id: InvocationId) -> Arc<ResponseBuffer> {
        Arc::new(ResponseBuffer {
            invocation_id,
            state: Mutex::new(BufState {
                writes: Vec::new(),
                pending: 0,
                failed: None,
                outcome: BufferOutcome::Held,
            }),
            notify: Notify::new(),
        })
    }

    /// Registers a write and returns its index.
    pub fn enqueue(&self, write: PendingWrite) -> usize {
        let mut st = self.state.lock();
        st.pending += 1;
        st.writes.push(write);
        st.writes.len() - 1
    }

    pub fn in_flight(&self, idx: usize) {
        let mut st = self.state.lock();
        let w = &mut st.writes[idx];
        w.state = WriteState::InFlight;
        w.attempts += 1;
    }

    pub fn acked(&self, idx: usize, version: u64, at_us: u64) {
        let mut st = self.state.lock();
        let w = &mut st.writes[idx];
        debug_assert!(!matches!(w.state, WriteState::Acked | WriteState::Failed));
        w.state = WriteState::Acked;
        w.version = Some(version);
        w.acked_at_us = Some(at_us);
        st.pending -= 1;
        drop(st);
        self.notify.notify_waiters();
    }

    pub fn failed(&self, idx: usize, error: String) {
        let mut st = self.state.lock();
        let w = &mut st.writes[idx];
        debug_assert!(!matches!(w.state, WriteState::Acked | WriteState::Failed));
        w.state = WriteState::Failed;
        st.pending -= 1;
        st.failed.get_or_insert(error);
        drop(st);
        self.notify.notify_waiters();
    }

    pub fn pending_count(&self) -> u32 {
        self.state.lock().pending
    }

    pub fn writes(&self) -> Vec<PendingWrite> {
        self.state.lock().writes.clone()
    }

    pub fn outcome(&self) -> BufferOutcome {
        self.state.lock().outcome
    }

    fn try_release(&self) -> Option<Release> {
        let mut st = self.state.lock();
        if st.outcome != BufferOutcome::Held {
            panic!("response for {} released twice", self.invocation_id);
        }
        let last_ack_us = st.writes.iter().filter_map(|w| w.acked_at_us).max();
        if let Some(e) = st.failed.clone() {
            st.outcome = BufferOutcome::ReleasedError;
            return Some(Release {
                outcome: st.outcome,
                last_ack_us,
                error: Some(e),
            });
        }
        if st.pending == 0 {
            st.outcome = BufferOutcome::ReleasedOk;
            return Some(Release {
                outcome: st.outcome,
                last_ack_us,
                error: None,
            });
        }
        None
    }

    /// Waits until the response may be released and marks it released.
    /// Must be called once per invocation.
    pub async fn release(&self) -> Release {
        loop {
            let notified = self.notify.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            if let Some(r) = self.try_release() {
                return r;
            }
            notified.await;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    fn write() -> PendingWrite {
        PendingWrite {
            invocation_id: InvocationId([1; 16]),
            idempotency_key: IdempotencyKey([2; 16]),
            object: ObjectRef::new("b", "k").unwrap(),
            grant: SlotGrant {
                region_id: 1,
                offset: 64,
                length: 1,
                checksum: 0,
            },
            state: WriteState::Queued,
            attempts: 0,
            version: None,
            acked_at_us: None,
        }
    }

    #[tokio::test]
    async fn no_writes_releases_immediately() {
        let b = ResponseBuffer::new(InvocationId([1; 16]));
        let r = b.release().await;
        assert_eq!(r.outcome, BufferOutcome::ReleasedOk);
        assert_eq!(r.last_ack_us, None);
    }

    #[tokio::test]
    async fn waits_for_last_ack() {
        let b = ResponseBuffer::new(InvocationId([1; 16]));
        let i = b.enqueue(write());
        let j = b.enqueue(write());
        let b2 = b.clone();
        tokio::spawn(async move {
            tokio::time::sleep(Duration::from_millis(20)).await;
            b2.acked(i, 1, 100);
            tokio::time::sleep(Duration::from_millis(20)).await;
            b2.acked(j, 2, 200);
        });
        let r = b.release().await;
        assert_eq!(r.outcome, BufferOutcome::ReleasedOk);
        assert_eq!(r.last_ack_us, Some(200));
        assert!(b.writes().iter().all(|w| w.state == WriteState::Acked));
    }

    #[tokio::test]
    async fn one_failure_releases_error() {
        let b = ResponseBuffer::new(InvocationId([1; 16]));
        let i = b.enqueue(write());
        let _j = b.enqueue(write());
        b.failed(i, "store down".into());
        let r = b.release().await;
        assert_eq!(r.outcome, BufferOutcome::ReleasedError);
        assert_eq!(r.error.as_deref(), Some("store down"));
    }

    #[tokio::test]
    #[should_panic(expected = "released twice")]
    async fn double_release_is_a_bug() {
        let b = ResponseBuffer::new(InvocationId([1; 16]));
        b.release().await;
        b.release().await;
    }
}
