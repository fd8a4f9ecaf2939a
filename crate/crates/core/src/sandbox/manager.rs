use std::collections::{HashMap, VecDeque};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::Serialize;
use tokio::io::{AsyncWriteExt, BufReader};
use tokio::net::unix::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{UnixListener, UnixStream};
use tokio::sync::{Mutex as AsyncMutex, MutexGuard as AsyncMutexGuard, Notify, OwnedSemaphorePermit, Semaphore};
use tokio::task::JoinHandle;

use crate::proto::{encode_raw, read_frame_async, Frame, Message, ProtoError};
use crate::shmem::{Region, RegionLayout, DEFAULT_REGION_CAP, DEFAULT_RING_CAPACITY};

use super::launch::{control_path, launch, LaunchHandle, LauncherKind, SandboxParams};
use super::{Mode, RestoreModel, SandboxError, SandboxRecord, SandboxState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Direction {
    ToSandbox,
    FromSandbox,
}

#[derive(Debug, Clone)]
pub struct CapturedFrame {
    pub sandbox_id: u64,
    pub direction: Direction,
    /// The complete encoded frame.
    pub bytes: Vec<u8>,
}

/// Records every sandbox-scope frame crossing any control channel.
#[derive(Debug, Default)]
pub struct FrameCapture {
    frames: Mutex<Vec<CapturedFrame>>,
}

impl FrameCapture {
    pub fn new() -> Arc<FrameCapture> {
        Arc::new(FrameCapture::default())
    }

    fn record(&self, sandbox_id: u64, direction: Direction, bytes: Vec<u8>) {
        self.frames.lock().push(CapturedFrame {
            sandbox_id,
            direction,
            bytes,
        });
    }

    pub fn frames(&self) -> Vec<CapturedFrame> {
        self.frames.lock().clone()
    }

    pub fn len(&self) -> usize {
        self.frames.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of occurrences of `needle` across all captured frames.
    pub fn count_occurrences(&self, needle: &[u8]) -> usize {
        if needle.is_empty() {
            return 0;
        }
        self.frames
            .lock()
            .iter()
            .map(|f| f.bytes.windows(needle.len()).filter(|w| *w == needle).count())
            .sum()
    }
}

/// The backend's end of a sandbox control channel.
pub struct ControlConn {
    sandbox_id: u64,
    rd: BufReader<OwnedReadHalf>,
    wr: OwnedWriteHalf,
    capture: Option<Arc<FrameCapture>>,
}

impl ControlConn {
    fn new(sandbox_id: u64, sock: UnixStream, capture: Option<Arc<FrameCapture>>) -> Self {
        let (rd, wr) = sock.into_split();
        ControlConn {
            sandbox_id,
            rd: BufReader::with_capacity(64 * 1024, rd),
            wr,
            capture,
        }
    }

    pub async fn send<M: Message>(&mut self, m: &M) -> Result<(), ProtoError> {
        self.send_raw(M::TYPE as u8, &m.encode()).await
    }

    pub async fn send_raw(&mut self, msg_type: u8, body: &[u8]) -> Result<(), ProtoError> {
        let bytes = encode_raw(msg_type, body)?;
        if let Some(c) = &self.capture {
            c.record(self.sandbox_id, Direction::ToSandbox, bytes.clone());
        }
        self.wr.write_all(&bytes).await?;
        self.wr.flush().await?;
        Ok(())
    }

    pub async fn recv(&mut self) -> Result<Option<Frame>, ProtoError> {
        let f = read_frame_async(&mut self.rd).await?;
        if let (Some(c), Some(f)) = (&self.capture, &f) {
            c.record(self.sandbox_id, Direction::FromSandbox, encode_raw(f.msg_type, &f.body)?);
        }
        Ok(f)
    }
}

#[derive(Debug, Clone)]
pub struct ManagerConfig {
    pub region_dir: PathBuf,
    pub launcher: LauncherKind,
    pub warm_per_function: usize,
    /// Total restored working-set pages the node can hold; unlimited if
    /// absent.
    pub node_memory_pages: Option<u64>,
    pub ring_capacity: u64,
    pub region_cap: u64,
    /// Store address handed to coupled sandboxes.
    pub store: Option<SocketAddr>,
    pub connect_timeout: Duration,
    pub capture: Option<Arc<FrameCapture>>,
    /// Zero point of every timestamp the manager records.
    pub epoch: Instant,
}

impl ManagerConfig {
    pub fn new(region_dir: PathBuf) -> Self {
        ManagerConfig {
            region_dir,
            launcher: LauncherKind::Thread,
            warm_per_function: 4,
            node_memory_pages: None,
            ring_capacity: DEFAULT_RING_CAPACITY,
            region_cap: DEFAULT_REGION_CAP,
            store: None,
            connect_timeout: Duration::from_secs(10),
            capture: None,
            epoch: Instant::now(),
        }
    }
}

/// One sandbox as the backend sees it.
pub struct Sandbox {
    pub id: u64,
    pub function: String,
    pub mode: Mode,
    pub pages: u64,
    pub restore_delay: Duration,
    region: Option<Arc<Region>>,
    ctl_path: PathBuf,
    epoch: Instant,
    record: Mutex<SandboxRecord>,
    listener: AsyncMutex<Option<UnixListener>>,
    conn: AsyncMutex<Option<ControlConn>>,
    launch: Mutex<Option<LaunchHandle>>,
    permit: Mutex<Option<OwnedSemaphorePermit>>,
    last_idle: Mutex<Instant>,
    capture: Option<Arc<FrameCapture>>,
}

impl std::fmt::Debug for Sandbox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sandbox")
            .field("id", &self.id)
            .field("function", &self.function)
            .field("mode", &self.mode)
            .field("state", &self.state())
            .finish()
    }
}

impl Sandbox {
    fn now_us(&self) -> u64 {
        self.epoch.elapsed().as_micros() as u64
    }

    pub fn region(&self) -> Option<&Arc<Region>> {
        self.region.as_ref()
    }

    pub fn state(&self) -> SandboxState {
        self.record.lock().state
    }

    pub fn record(&self) -> SandboxRecord {
        self.record.lock().clone()
    }

    fn transition(&self, to: SandboxState) -> Result<(), SandboxError> {
        let now = self.now_us();
        self.record.lock().transition(to, now)
    }

    /// Exclusive use of the control channel, for the duration of one
    /// invocation.
    pub async fn channel(&self) -> AsyncMutexGuard<'_, Option<ControlConn>> {
        self.conn.lock().await
    }

    /// Waits up to `timeout` for the frontend to reconnect after its channel
    /// broke, and installs the new connection.
    pub async fn reconnect(&self, conn: &mut Option<ControlConn>, timeout: Duration) -> bool {
        let guard = self.listener.lock().await;
        let Some(listener) = guard.as_ref() else {
            return false;
        };
        match tokio::time::timeout(timeout, listener.accept()).await {
            Ok(Ok((sock, _))) => {
                *conn = Some(ControlConn::new(self.id, sock, self.capture.clone()));
                true
            }
            _ => false,
        }
    }
}

impl Drop for Sandbox {
    fn drop(&mut self) {
        if let Some(h) = self.launch.get_mut().as_mut() {
            h.kill();
        }
        let _ = std::fs::remove_file(&self.ctl_path);
    }
}

/// A sandbox still restoring.
pub struct ColdStart {
    pub sandbox: Arc<Sandbox>,
    task: JoinHandle<Result<(), SandboxError>>,
}

impl ColdStart {
    /// Resolves once the restore delay has elapsed and the frontend is
    /// connected.
    pub async fn ready(self) -> Result<Arc<Sandbox>, SandboxError> {
        match self.task.await {
            Ok(Ok(())) => Ok(self.sandbox),
            Ok(Err(e)) => Err(e),
            Err(e) => Err(SandboxError::Spawn(format!("bring-up task: {e}"))),
        }
    }
}

pub enum Provisioned {
    Warm(Arc<Sandbox>),
    Cold(ColdStart),
}

impl Provisioned {
    pub fn sandbox(&self) -> &Arc<Sandbox> {
        match self {
            Provisioned::Warm(s) => s,
            Provisioned::Cold(c) => &c.sandbox,
        }
    }

    pub fn is_warm(&self) -> bool {
        matches!(self, Provisioned::Warm(_))
    }
}

type PoolKey = (String, Mode);

#[derive(Debug, Default, Clone, Copy, Serialize)]
pub struct ManagerStats {
    pub cold_starts: u64,
    pub warm_starts: u64,
    pub evictions: u64,
    pub live: u64,
    pub idle: u64,
    pub pages_in_use: u64,
}

/// Provisions, pools, and releases sandboxes.
pub struct SandboxManager {
    cfg: ManagerConfig,
    next_id: AtomicU64,
    idle: Mutex<HashMap<PoolKey, VecDeque<Arc<Sandbox>>>>,
    live: Mutex<HashMap<u64, Arc<Sandbox>>>,
    memory: Option<Arc<Semaphore>>,
    changed: Notify,
    cold_starts: AtomicU64,
    warm_starts: AtomicU64,
    evictions: AtomicU64,
}

impl SandboxManager {
    pub fn new(cfg: ManagerConfig) -> Arc<SandboxManager> {
        let memory = cfg
            .node_memory_pages
            .map(|p| Arc::new(Semaphore::new(p.min(Semaphore::MAX_PERMITS as u64) as usize)));
        // Ids are unique across backend restarts sharing a directory, so a
        // stale frontend can never reach a newer sandbox's endpoint.
        let base = (rand::random::<u32>() as u64) << 24;
        Arc::new(SandboxManager {
            cfg,
            next_id: AtomicU64::new(base),
            idle: Mutex::new(HashMap::new()),
            live: Mutex::new(HashMap::new()),
            memory,
            changed: Notify::new(),
            cold_starts: AtomicU64::new(0),
            warm_starts: AtomicU64::new(0),
            evictions: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ManagerConfig {
        &self.cfg
    }

    pub fn stats(&self) -> ManagerStats {
        let live = self.live.lock();
        ManagerStats {
            cold_starts: self.cold_starts.load(Ordering::Relaxed),
            warm_starts: self.warm_starts.load(Ordering::Relaxed),
            evictions: self.evictions.load(Ordering::Relaxed),
            live: live.len() as u64,
            idle: self.idle.lock().values().map(|q| q.len() as u64).sum(),
            pages_in_use: live.values().map(|s| s.pages).sum(),
        }
    }

    pub fn get(&self, sandbox_id: u64) -> Option<Arc<Sandbox>> {
        self.live.lock().get(&sandbox_id).cloned()
    }

    fn take_idle(&self, key: &PoolKey) -> Option<Arc<Sandbox>> {
        self.idle.lock().get_mut(key).and_then(|q| q.pop_back())
    }

    /// Retires the least recently idled sandbox of any function.
    fn evict_one(&self) -> bool {
        let victim = {
            let mut idle = self.idle.lock();
            let key = idle
                .iter()
                .filter_map(|(k, q)| q.front().map(|s| (k.clone(), *s.last_idle.lock())))
                .min_by_key(|(_, t)| *t)
                .map(|(k, _)| k);
            key.and_then(|k| idle.get_mut(&k).and_then(|q| q.pop_front()))
        };
        match victim {
            Some(s) => {
                let _ = s.transition(SandboxState::Draining);
                self.retire(&s);
                self.evictions.fetch_add(1, Ordering::Relaxed);
                true
            }
            None => false,
        }
    }

    /// Hands out a warm sandbox for (function, mode) if one is idle, else
    /// starts restoring a new one. Waits for node memory when the budget is
    /// exhausted and nothing idle can be evicted.
    pub async fn provision(
        self: &Arc<Self>,
        function: &str,
        mode: Mode,
        restore: &RestoreModel,
        slot_bytes: u64,
        rate_limit_bps: u64,
    ) -> Result<Provisioned, SandboxError> {
        let key = (function.to_string(), mode);
        let pages = restore.pages(mode);
        if let Some(total) = self.cfg.node_memory_pages {
            if pages > total {
                return Err(SandboxError::Spawn(format!("{pages} pages exceed node memory of {total}")));
            }
        }
        let permit = loop {
            let notified = self.changed.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            if let Some(s) = self.take_idle(&key) {
                self.warm_starts.fetch_add(1, Ordering::Relaxed);
                return Ok(Provisioned::Warm(s));
            }
            match &self.memory {
                None => break None,
                Some(sem) => match sem.clone().try_acquire_many_owned(pages as u32) {
                    Ok(p) => break Some(p),
                    Err(_) => {
                        if !self.evict_one() {
                            notified.await;
                        }
                    }
                },
            }
        };
        self.cold(function, mode, restore, slot_bytes, rate_limit_bps, permit)
    }

    fn cold(
        self: &Arc<Self>,
        function: &str,
        mode: Mode,
        restore: &RestoreModel,
        slot_bytes: u64,
        rate_limit_bps: u64,
        permit: Option<OwnedSemaphorePermit>,
    ) -> Result<Provisioned, SandboxError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed) + 1;
        let ctl_path = control_path(&self.cfg.region_dir, id);
        let _ = std::fs::remove_file(&ctl_path);
        let listener = UnixListener::bind(&ctl_path)?;
        let region = if mode.is_offloaded() {
            let layout = RegionLayout::slot(slot_bytes).with_ring(self.cfg.ring_capacity);
            Some(Arc::new(Region::create(&self.cfg.region_dir, id, layout, self.cfg.region_cap)?))
        } else {
            None
        };
        let now = self.cfg.epoch.elapsed().as_micros() as u64;
        let sandbox = Arc::new(Sandbox {
            id,
            function: function.to_string(),
            mode,
            pages: restore.pages(mode),
            restore_delay: restore.delay(mode),
            record: Mutex::new(SandboxRecord::new(id, function, id, ctl_path.clone(), now)),
            region,
            ctl_path: ctl_path.clone(),
            epoch: self.cfg.epoch,
            listener: AsyncMutex::new(None),
            conn: AsyncMutex::new(None),
            launch: Mutex::new(None),
            permit: Mutex::new(permit),
            last_idle: Mutex::new(Instant::now()),
            capture: self.cfg.capture.clone(),
        });
        self.live.lock().insert(id, sandbox.clone());
        self.cold_starts.fetch_add(1, Ordering::Relaxed);
        let params = SandboxParams {
            sandbox_id: id,
            control: ctl_path,
            region: sandbox.region.as_ref().map(|r| r.descriptor().file_name.clone()),
            function: function.to_string(),
            mode,
            store: self.cfg.store,
            rate_limit_bps,
        };
        let mgr = self.clone();
        let sb = sandbox.clone();
        let task = tokio::spawn(async move {
            let r = bring_up(&sb, &mgr.cfg, params, listener).await;
            if r.is_err() {
                mgr.retire(&sb);
            }
            r
        });
        Ok(Provisioned::Cold(ColdStart { sandbox, task }))
    }

    /// Ready -> Busy, before INVOKE is sent.
    pub fn mark_busy(&self, sandbox: &Sandbox) -> Result<(), SandboxError> {
        sandbox.transition(SandboxState::Busy)
    }

    /// Returns a sandbox whose handler has responded to service, without
    /// waiting for its delegated writes: back to the warm pool, or released
    /// when the pool is full.
    pub fn release_early(&self, sandbox: &Arc<Sandbox>) -> Result<SandboxState, SandboxError> {
        let key = (sandbox.function.clone(), sandbox.mode);
        let mut idle = self.idle.lock();
        let state = sandbox.state();
        if state != SandboxState::Busy {
            return Err(SandboxError::IllegalState {
                sandbox_id: sandbox.id,
                from: state,
                to: SandboxState::Ready,
            });
        }
        let q = idle.entry(key).or_default();
        if q.len() < self.cfg.warm_per_function {
            sandbox.transition(SandboxState::Ready)?;
            *sandbox.last_idle.lock() = Instant::now();
            q.push_back(sandbox.clone());
            drop(idle);
            self.changed.notify_waiters();
            Ok(SandboxState::Ready)
        } else {
            drop(idle);
            sandbox.transition(SandboxState::Draining)?;
            self.retire(sandbox);
            Ok(SandboxState::Released)
        }
    }

    /// Puts a Ready sandbox that never ran an invocation back in the pool.
    pub fn return_idle(&self, sandbox: &Arc<Sandbox>) {
        if sandbox.state() != SandboxState::Ready {
            return self.discard(sandbox);
        }
        let mut idle = self.idle.lock();
        let q = idle.entry((sandbox.function.clone(), sandbox.mode)).or_default();
        if q.len() < self.cfg.warm_per_function {
            *sandbox.last_idle.lock() = Instant::now();
            q.push_back(sandbox.clone());
            drop(idle);
            self.changed.notify_waiters();
        } else {
            drop(idle);
            self.discard(sandbox);
        }
    }

    /// Takes a sandbox out of service for good, whatever it was doing.
    pub fn discard(&self, sandbox: &Arc<Sandbox>) {
        {
            let mut idle = self.idle.lock();
            if let Some(q) = idle.get_mut(&(sandbox.function.clone(), sandbox.mode)) {
                q.retain(|s| s.id != sandbox.id);
            }
        }
        if matches!(sandbox.state(), SandboxState::Busy | SandboxState::Ready) {
            let _ = sandbox.transition(SandboxState::Draining);
        }
        self.retire(sandbox);
    }

    fn retire(&self, sandbox: &Arc<Sandbox>) {
        if sandbox.state() != SandboxState::Released {
            let _ = sandbox.transition(SandboxState::Released);
        }
        self.live.lock().remove(&sandbox.id);
        sandbox.permit.lock().take();
        if let Some(mut h) = sandbox.launch.lock().take() {
            h.kill();
        }
        if let Ok(mut l) = sandbox.listener.try_lock() {
            l.take();
        }
        if let Ok(mut c) = sandbox.conn.try_lock() {
            c.take();
        }
        self.changed.notify_waiters();
    }

    /// Releases every idle sandbox.
    pub fn drain_idle(&self) {
        let all: Vec<_> = self.idle.lock().drain().flat_map(|(_, q)| q).collect();
        for s in all {
            let _ = s.transition(SandboxState::Draining);
            self.retire(&s);
        }
    }

    /// Releases everything, busy or not.
    pub fn shutdown(&self) {
        self.drain_idle();
        let all: Vec<_> = self.live.lock().values().cloned().collect();
        for s in all {
            self.discard(&s);
        }
    }
}

async fn bring_up(
    sb: &Arc<Sandbox>,
    cfg: &ManagerConfig,
    params: SandboxParams,
    listener: UnixListener,
) -> Result<(), SandboxError> {
    let handle = launch(&cfg.launcher, params)?;
    *sb.launch.lock() = Some(handle);
    let (_, accepted) = tokio::join!(
        tokio::time::sleep(sb.restore_delay),
        tokio::time::timeout(cfg.connect_timeout, listener.accept())
    );
    let sock = match accepted {
        Ok(Ok((sock, _))) => sock,
        Ok(Err(e)) => return Err(e.into()),
        Err(_) => return Err(SandboxError::ConnectTimeout(sb.id)),
    };
    *sb.conn.lock().await = Some(ControlConn::new(sb.id, sock, cfg.capture.clone()));
    *sb.listener.lock().await = Some(listener);
    sb.transition(SandboxState::Ready)
}
