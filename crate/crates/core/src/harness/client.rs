//! The ingress side of the wire: one TCP connection per attempt, retried
//! under the same idempotency key when the backend goes away.

use std::net::SocketAddr;
use std::time::{Duration, Instant};

use tokio::io::BufReader;
use tokio::net::TcpStream;

use crate::backend::MetricsSnapshot;
use crate::proto::*;

use super::HarnessError;

#[derive(Debug, Clone)]
pub struct IngressClient {
    pub addr: SocketAddr,
    /// Attempts per logical invocation, including the first.
    pub max_attempts: u32,
    /// First retry delay; doubles per retry up to one second.
    pub backoff: Duration,
    /// Per-attempt deadline.
    pub attempt_timeout: Duration,
}

/// The single caller-visible result of one logical invocation.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub response: IngressResponse,
    pub attempts: u32,
    pub latency: Duration,
}

impl IngressClient {
    pub fn new(addr: SocketAddr) -> Self {
        IngressClient {
            addr,
            max_attempts: 10,
            backoff: Duration::from_millis(50),
            attempt_timeout: Duration::from_secs(120),
        }
    }

    async fn attempt(&self, env: &InvocationEnvelope) -> Result<IngressResponse, HarnessError> {
        let sock = TcpStream::connect(self.addr).await?;
        sock.set_nodelay(true)?;
        let (rd, mut wr) = sock.into_split();
        let mut rd = BufReader::new(rd);
        write_frame_async(&mut wr, MessageType::IngressInvoke, &env.to_json()).await?;
        loop {
            let frame = read_frame_async(&mut rd)
                .await?
                .ok_or_else(|| HarnessError::Transport("backend closed the connection".into()))?;
            match frame.kind_in(Scope::Ingress)? {
                MessageType::IngressResponse => return Ok(IngressResponse::from_json(&frame.body)?),
                MessageType::Error => {
                    let e = ErrorMsg::decode(&frame.body)?;
                    return Err(HarnessError::Transport(format!("backend error frame: {}", e.message)));
                }
                _ => continue,
            }
        }
    }

    /// Sends one logical invocation until it gets a response. A retry is a
    /// new attempt with a fresh invocation id and the same idempotency key.
    pub async fn invoke(&self, mut env: InvocationEnvelope) -> Result<Outcome, HarnessError> {
        let start = Instant::now();
        let mut last = None;
        let mut backoff = self.backoff;
        for attempt in 1..=self.max_attempts {
            if attempt > 1 {
                env.invocation_id = InvocationId::random();
                tokio::time::sleep(backoff).await;
                backoff = (backoff * 2).min(Duration::from_secs(1));
            }
            match tokio::time::timeout(self.attempt_timeout, self.attempt(&env)).await {
                Ok(Ok(response)) => {
                    return Ok(Outcome {
                        response,
                        attempts: attempt,
                        latency: start.elapsed(),
                    })
                }
                Ok(Err(e)) => {
                    tracing::debug!("attempt {attempt} for {}: {e}", env.idempotency_key);
                    last = Some(e);
                }
                Err(_) => last = Some(HarnessError::Transport("attempt timed out".into())),
            }
        }
        Err(last.unwrap_or_else(|| HarnessError::Transport("no attempts".into())))
    }

    /// Asks the backend for its counters.
    pub async fn status(&self) -> Result<MetricsSnapshot, HarnessError> {
        let sock = TcpStream::connect(self.addr).await?;
        let (rd, mut wr) = sock.into_split();
        let mut rd = BufReader::new(rd);
        write_frame_async(&mut wr, MessageType::StatusQuery, b"").await?;
        let frame = read_frame_async(&mut rd)
            .await?
            .ok_or_else(|| HarnessError::Transport("backend closed the connection".into()))?;
        match frame.kind_in(Scope::Ingress)? {
            MessageType::StatusResponse => {
                serde_json::from_slice(&frame.body).map_err(|e| HarnessError::Schema(e.to_string()))
            }
            t => Err(HarnessError::Transport(format!("expected STATUS_RESPONSE, got {t:?}"))),
        }
    }
}
