//! In-memory object store service.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::watch;

use crate::proto::ObjectRef;

use super::wire::*;
use super::StoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoreProfile {
    pub one_way_latency_us: u64,
    pub bandwidth_bps: u64,
    pub fail_next_puts: u32,
}

impl Default for StoreProfile {
    fn default() -> Self {
        StoreProfile {
            one_way_latency_us: 0,
            bandwidth_bps: 10_000_000_000,
            fail_next_puts: 0,
        }
    }
}

impl StoreProfile {
    pub fn new(one_way_latency_us: u64, bandwidth_bps: u64) -> Self {
        assert!(bandwidth_bps > 0, "bandwidth must be positive");
        StoreProfile {
            one_way_latency_us,
            bandwidth_bps,
            fail_next_puts: 0,
        }
    }

    /// Simulated service time for a transfer of `bytes`.
    pub fn service_time(&self, bytes: u64) -> Duration {
        let transfer_ns = (bytes as u128 * 8 * 1_000_000_000) / self.bandwidth_bps as u128;
        Duration::from_micros(self.one_way_latency_us) + Duration::from_nanos(transfer_ns as u64)
    }
}

#[derive(Debug, Clone)]
pub struct StoredObject {
    pub object: ObjectRef,
    pub data: Arc<Vec<u8>>,
    pub version: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StoreOp {
    Get,
    Put,
    Version,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub op: StoreOp,
    pub object: ObjectRef,
    /// Time since the store started.
    pub at: Duration,
    pub ok: bool,
    /// Version acknowledged (PUT) or returned (GET).
    pub version: u64,
}

/// Objects, profile, and request log. Shared between the service and
/// in-process callers (tests, the harness).
pub struct StoreState {
    objects: RwLock<HashMap<ObjectRef, StoredObject>>,
    profile: Mutex<StoreProfile>,
    log: Mutex<Vec<LogEntry>>,
    started: Instant,
}

impl StoreState {
    pub fn new(profile: StoreProfile) -> Arc<Self> {
        Arc::new(StoreState {
            objects: RwLock::new(HashMap::new()),
            profile: Mutex::new(profile),
            log: Mutex::new(Vec::new()),
            started: Instant::now(),
        })
    }

    pub fn profile(&self) -> StoreProfile {
        *self.profile.lock()
    }

    pub fn set_profile(&self, profile: StoreProfile) {
        *self.profile.lock() = profile;
    }

    pub fn fail_next_puts(&self, n: u32) {
        self.profile.lock().fail_next_puts = n;
    }

    /// Direct insert, bypassing delays and the log. Returns the new version.
    pub fn seed(&self, object: ObjectRef, data: Vec<u8>) -> u64 {
        self.apply_put(object, Arc::new(data))
    }

    fn apply_put(&self, object: ObjectRef, data: Arc<Vec<u8>>) -> u64 {
        let mut map = self.objects.write();
        let version = map.get(&object).map(|o| o.version).unwrap_or(0) + 1;
        map.insert(
            object.clone(),
            StoredObject {
                object,
                data,
                version,
            },
        );
        version
    }

    pub fn get(&self, object: &ObjectRef) -> Option<StoredObject> {
        self.objects.read().get(object).cloned()
    }

    pub fn object_count(&self) -> usize {
        self.objects.read().len()
    }

    pub fn log(&self) -> Vec<LogEntry> {
        self.log.lock().clone()
    }

    pub fn clear_log(&self) {
        self.log.lock().clear();
    }

    pub fn count(&self, op: StoreOp, object: Option<&ObjectRef>) -> usize {
        self.log
            .lock()
            .iter()
            .filter(|e| e.op == op && object.is_none_or(|o| &e.object == o))
            .count()
    }

    /// Offset from the store's start, for correlating log entries with
    /// other monotonic timestamps.
    pub fn elapsed(&self) -> Duration {
        self.started.elapsed()
    }

    pub fn started(&self) -> Instant {
        self.started
    }

    fn record(&self, op: StoreOp, object: &ObjectRef, ok: bool, version: u64) {
        self.log.lock().push(LogEntry {
            op,
            object: object.clone(),
            at: self.started.elapsed(),
            ok,
            version,
        });
    }

    /// Consumes one injected failure if any are armed.
    fn take_failure(&self) -> bool {
        let mut p = self.profile.lock();
        if p.fail_next_puts > 0 {
            p.fail_next_puts -= 1;
            true
        } else {
            false
        }
    }
}

/// A running store service.
pub struct StoreServer {
    addr: SocketAddr,
    state: Arc<StoreState>,
    shutdown: watch::Sender<bool>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl StoreServer {
    /// Starts the service on its own runtime thread, so that it outlives
    /// restarts of anything else in the process.
    pub fn start(listen: &str, state: Arc<StoreState>) -> Result<StoreServer, StoreError> {
        let std_listener = std::net::TcpListener::bind(listen)?;
        std_listener.set_nonblocking(true)?;
        let addr = std_listener.local_addr()?;
        let (tx, rx) = watch::channel(false);
        let st = state.clone();
        let thread = std::thread::Builder::new()
            .name("store".into())
            .spawn(move || {
                let rt = tokio::runtime::Builder::new_multi_thread()
                    .worker_threads(2)
                    .enable_all()
                    .build()
                    .expect("store runtime");
                rt.block_on(async move {
                    let listener = TcpListener::from_std(std_listener).expect("store listener");
                    serve(listener, st, rx).await;
                });
            })?;
        Ok(StoreServer {
            addr,
            state,
            shutdown: tx,
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn state(&self) -> &Arc<StoreState> {
        &self.state
    }
}

impl Drop for StoreServer {
    fn drop(&mut self) {
        let _ = self.shutdown.send(true);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Accept loop; runs until `shutdown` flips to true.
pub async fn serve(listener: TcpListener, state: Arc<StoreState>, mut shutdown: watch::Receiver<bool>) {
    let mut conns = tokio::task::JoinSet::new();
    loop {
        tokio::select! {
            accepted = listener.accept() => {
                let Ok((sock, _)) = accepted else { continue };
                let _ = sock.set_nodelay(true);
                let st = state.clone();
                conns.spawn(async move {
                    if let Err(e) = handle_conn(sock, st).await {
                        tracing::debug!("store connection ended: {e}");
                    }
                });
            }
            _ = shutdown.changed() => break,
            Some(_) = conns.join_next(), if !conns.is_empty() => {}
        }
    }
    conns.abort_all();
}

async fn handle_conn(sock: TcpStream, state: Arc<StoreState>) -> Result<(), StoreError> {
    let (rd, mut wr) = sock.into_split();
    let mut rd = BufReader::with_capacity(256 * 1024, rd);
    loop {
        let mut len = [0u8; 4];
        match rd.read_exact(&mut len).await {
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e.into()),
        }
        let len = u32::from_le_bytes(len) as u64;
        if len == 0 || len > MAX_MESSAGE {
            wr.write_all(&response_header(ST_BAD_REQUEST, 0)).await?;
            return Ok(());
        }
        let mut body = vec![0u8; len as usize];
        rd.read_exact(&mut body).await?;
        let (op, object, payload) = match parse_request(&body) {
            Ok(v) => v,
            Err(_) => {
                wr.write_all(&response_header(ST_BAD_REQUEST, 0)).await?;
                continue;
            }
        };
        let profile = state.profile();
        match op {
            OP_GET => match state.get(&object) {
                Some(obj) => {
                    tokio::time::sleep(profile.service_time(obj.data.len() as u64)).await;
                    state.record(StoreOp::Get, &object, true, obj.version);
                    wr.write_all(&response_header(ST_OK, obj.data.len() as u64)).await?;
                    wr.write_all(&obj.data).await?;
                }
                None => {
                    tokio::time::sleep(profile.service_time(0)).await;
                    state.record(StoreOp::Get, &object, false, 0);
                    wr.write_all(&response_header(ST_NOT_FOUND, 0)).await?;
                }
            },
            OP_PUT => {
                let size = payload.len() as u64;
                tokio::time::sleep(profile.service_time(size)).await;
                if state.take_failure() {
                    state.record(StoreOp::Put, &object, false, 0);
                    wr.write_all(&response_header(ST_INJECTED_FAILURE, 0)).await?;
                } else {
                    let data = Arc::new(payload.to_vec());
                    drop(body);
                    let version = state.apply_put(object.clone(), data);
                    state.record(StoreOp::Put, &object, true, version);
                    wr.write_all(&response_header(ST_OK, 8)).await?;
                    wr.write_all(&version.to_le_bytes()).await?;
                }
            }
            OP_VERSION => {
                tokio::time::sleep(profile.service_time(0)).await;
                let version = state.get(&object).map(|o| o.version);
                state.record(StoreOp::Version, &object, version.is_some(), version.unwrap_or(0));
                match version {
                    Some(v) => {
                        wr.write_all(&response_header(ST_OK, 8)).await?;
                        wr.write_all(&v.to_le_bytes()).await?;
                    }
                    None => wr.write_all(&response_header(ST_NOT_FOUND, 0)).await?,
                }
            }
            _ => wr.write_all(&response_header(ST_BAD_REQUEST, 0)).await?,
        }
        wr.flush().await?;
    }
}
