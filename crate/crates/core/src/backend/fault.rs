//! Crash injection for the crash-only recovery path.

use std::collections::HashMap;
use std::str::FromStr;
use std::sync::mpsc;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultPoint {
    /// After a prefetch GET has reached the store, before its payload is read.
    DuringPrefetch,
    /// After the handler's FN_RESPONSE, before the store acknowledges its
    /// delegated writes.
    PostResponsePreAck,
}

impl FromStr for FaultPoint {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "during-prefetch" => Ok(FaultPoint::DuringPrefetch),
            "post-response-pre-ack" | "post-fn-response-pre-ack" => Ok(FaultPoint::PostResponsePreAck),
            other => Err(format!("unknown kill point {other:?}")),
        }
    }
}

/// Armed kill points shared between a backend and its supervisor.
#[derive(Debug, Default)]
pub struct FaultInjector {
    armed: Mutex<HashMap<FaultPoint, u32>>,
    fired: Mutex<Vec<FaultPoint>>,
    tx: Mutex<Option<mpsc::Sender<FaultPoint>>>,
}

impl FaultInjector {
    pub fn new() -> Arc<FaultInjector> {
        Arc::new(FaultInjector::default())
    }

    pub fn arm(&self, point: FaultPoint, count: u32) {
        *self.armed.lock().entry(point).or_default() += count;
    }

    pub fn armed(&self, point: FaultPoint) -> u32 {
        self.armed.lock().get(&point).copied().unwrap_or(0)
    }

    pub fn fired(&self) -> Vec<FaultPoint> {
        self.fired.lock().clone()
    }

    pub(super) fn subscribe(&self) -> mpsc::Receiver<FaultPoint> {
        let (tx, rx) = mpsc::channel();
        *self.tx.lock() = Some(tx);
        rx
    }

    /// If `point` is armed and a supervisor listens, asks it to kill the
    /// backend and parks the calling task until that happens.
    pub async fn checkpoint(&self, point: FaultPoint) {
        let tx = self.tx.lock().clone();
        let Some(tx) = tx else { return };
        {
            let mut armed = self.armed.lock();
            match armed.get_mut(&point) {
                Some(n) if *n > 0 => *n -= 1,
                _ => return,
            }
        }
        self.fired.lock().push(point);
        tracing::info!("fault point {point:?} reached; killing backend");
        if tx.send(point).is_ok() {
            std::future::pending::<()>().await;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn unarmed_or_unsupervised_is_a_no_op() {
        let f = FaultInjector::new();
        f.arm(FaultPoint::DuringPrefetch, 1);
        f.checkpoint(FaultPoint::DuringPrefetch).await;
        assert_eq!(f.armed(FaultPoint::DuringPrefetch), 1);
        let _rx = f.subscribe();
        f.checkpoint(FaultPoint::PostResponsePreAck).await;
        assert!(f.fired().is_empty());
    }

    #[tokio::test]
    async fn armed_point_fires_once() {
        let f = FaultInjector::new();
        f.arm(FaultPoint::DuringPrefetch, 1);
        let rx = f.subscribe();
        let f2 = f.clone();
        let parked = tokio::spawn(async move { f2.checkpoint(FaultPoint::DuringPrefetch).await });
        let got = tokio::task::spawn_blocking(move || rx.recv().unwrap()).await.unwrap();
        assert_eq!(got, FaultPoint::DuringPrefetch);
        assert_eq!(f.armed(FaultPoint::DuringPrefetch), 0);
        assert!(!parked.is_finished());
        parked.abort();
    }

    #[test]
    fn names_parse() {
        assert_eq!("during-prefetch".parse::<FaultPoint>().unwrap(), FaultPoint::DuringPrefetch);
        assert_eq!("post-fn-response-pre-ack".parse::<FaultPoint>().unwrap(), FaultPoint::PostResponsePreAck);
        assert!("never".parse::<FaultPoint>().is_err());
    }
}
