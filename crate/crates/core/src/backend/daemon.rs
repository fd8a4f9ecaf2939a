//! The backend daemon: ingress, invocation orchestration, and the per-sandbox
//! GET/PUT service.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};
use serde::Serialize;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;

use crate::proto::*;
use crate::sandbox::{ControlConn, FrameCapture, ManagerConfig, Mode, Provisioned, Sandbox, SandboxManager};
use crate::shmem::{align_up, fnv1a64, Region, SlotGrant, HEADER_BYTES, PAGE_BYTES, RING_CTRL_BYTES, SLOT_ALIGN};
use crate::store::{GetStream, StoreClient, StoreError};

use super::config::{BackendConfig, FunctionConfig};
use super::fault::{FaultInjector, FaultPoint};
use super::metrics::{Metrics, MetricsSnapshot};
use super::ratelimit::{per_client_rate, RateLimits, TokenBucket};
use super::writeback::{PendingWrite, ResponseBuffer, WriteState};
use super::BackendError;

/// Transfer granularity for rate limiting and ring pushes.
const CHUNK: usize = 64 * 1024;
/// A ring transfer with no progress for this long is abandoned.
const RING_STALL: Duration = Duration::from_secs(10);

#[derive(Clone)]
pub struct BackendOptions {
    pub config: BackendConfig,
    pub mode: Mode,
    pub store: SocketAddr,
    pub region_dir: PathBuf,
    pub capture: Option<Arc<FrameCapture>>,
    pub faults: Option<Arc<FaultInjector>>,
}

impl BackendOptions {
    pub fn new(config: BackendConfig, mode: Mode, store: SocketAddr, region_dir: PathBuf) -> Self {
        BackendOptions {
            config,
            mode,
            store,
            region_dir,
            capture: None,
            faults: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PrefetchState {
    Fetching,
    Filled,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefetchRecord {
    pub invocation_id: InvocationId,
    pub hint: InputHint,
    pub state: PrefetchState,
    pub grant: Option<SlotGrant>,
    pub error: Option<String>,
}

/// Which token served which invocation, by fingerprint only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CredentialUse {
    pub function: String,
    pub invocation_id: InvocationId,
    /// FNV-1a-64 of the token.
    pub fingerprint: u64,
}

/// State of one invocation while its sandbox is busy.
struct Active {
    env: Arc<InvocationEnvelope>,
    region: Arc<Region>,
    limiter: Arc<TokenBucket>,
    filled: HashMap<ObjectRef, SlotGrant>,
    opaque: bool,
    put_grants: HashMap<u64, (ObjectRef, u8, SlotGrant)>,
    ring_put: Option<(u64, ObjectRef, u8, u64)>,
    buffer: Arc<ResponseBuffer>,
}

pub struct Backend {
    cfg: RwLock<Arc<BackendConfig>>,
    mode: Mode,
    store: Arc<StoreClient>,
    manager: Arc<SandboxManager>,
    limits: RateLimits,
    metrics: Arc<Metrics>,
    epoch: Instant,
    faults: Option<Arc<FaultInjector>>,
    credential_uses: Mutex<Vec<CredentialUse>>,
}

fn clean_region_dir(dir: &std::path::Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for e in std::fs::read_dir(dir)? {
        let e = e?;
        let name = e.file_name();
        let name = name.to_string_lossy();
        if name.starts_with("nexus-region-") || name.starts_with("nexus-ctl-") {
            let _ = std::fs::remove_file(e.path());
        }
    }
    Ok(())
}

impl Backend {
    /// Builds a backend. Leftover region files and endpoints in the region
    /// directory belong to a dead predecessor and are removed.
    pub fn new(opts: &BackendOptions) -> Result<Arc<Backend>, BackendError> {
        opts.config.validate()?;
        clean_region_dir(&opts.region_dir)?;
        let epoch = Instant::now();
        let mut mc = ManagerConfig::new(opts.region_dir.clone());
        mc.launcher = opts.config.launcher.clone();
        mc.warm_per_function = opts.config.pool.warm_per_function;
        mc.node_memory_pages = opts.config.pool.node_memory_pages;
        mc.ring_capacity = opts.config.shmem.ring_capacity;
        mc.region_cap = opts.config.shmem.region_cap;
        mc.store = Some(opts.store);
        mc.connect_timeout = Duration::from_millis(opts.config.connect_timeout_ms);
        mc.capture = opts.capture.clone();
        mc.epoch = epoch;
        Ok(Arc::new(Backend {
            cfg: RwLock::new(Arc::new(opts.config.clone())),
            mode: opts.mode,
            store: StoreClient::new(opts.store),
            manager: SandboxManager::new(mc),
            limits: RateLimits::new(),
            metrics: Arc::new(Metrics::default()),
            epoch,
            faults: opts.faults.clone(),
            credential_uses: Mutex::new(Vec::new()),
        }))
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn config(&self) -> Arc<BackendConfig> {
        self.cfg.read().clone()
    }

    /// Swaps in a new configuration; invocations already running keep the
    /// old one.
    pub fn reload(&self, cfg: BackendConfig) -> Result<(), BackendError> {
        cfg.validate()?;
        *self.cfg.write() = Arc::new(cfg);
        self.limits.clear();
        Ok(())
    }

    pub fn manager(&self) -> &Arc<SandboxManager> {
        &self.manager
    }

    pub fn now_us(&self) -> u64 {
        self.epoch.elapsed().as_micros() as u64
    }

    pub fn epoch(&self) -> Instant {
        self.epoch
    }

    /// The function's storage credentials. Only backend code calls this;
    /// the token never travels toward a sandbox.
    pub fn resolve_credentials(&self, function: &str) -> Result<String, BackendError> {
        self.config()
            .function(function)
            .map(|f| f.credentials_token.clone())
            .ok_or_else(|| BackendError::UnknownFunction(function.to_string()))
    }

    pub fn credential_uses(&self) -> Vec<CredentialUse> {
        self.credential_uses.lock().clone()
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        let mut s = self.metrics.snapshot();
        let m = self.manager.stats();
        s.cold_starts = m.cold_starts;
        s.warm_starts = m.warm_starts;
        s.evictions = m.evictions;
        s.live_sandboxes = m.live;
        s.idle_sandboxes = m.idle;
        s
    }

    /// Waits for a permit to move `n_bytes` for one client of a function.
    pub async fn rate_limit_acquire(&self, function: &str, client: &str, n_bytes: u64) -> Result<(), BackendError> {
        let f = self
            .config()
            .function(function)
            .cloned()
            .ok_or_else(|| BackendError::UnknownFunction(function.to_string()))?;
        self.limiter(&f, client).acquire(n_bytes).await;
        Ok(())
    }

    fn limiter(&self, f: &FunctionConfig, client: &str) -> Arc<TokenBucket> {
        self.limits.bucket(&f.name, client, f.rate_limit_bps, f.clients.len())
    }

    async fn checkpoint(&self, point: FaultPoint) {
        if let Some(f) = &self.faults {
            f.checkpoint(point).await;
        }
    }

    // ----- ingress -----

    /// Accepts ingress connections until the task is dropped.
    pub async fn serve_ingress(self: Arc<Self>, listener: TcpListener) {
        loop {
            match listener.accept().await {
                Ok((sock, _)) => {
                    let _ = sock.set_nodelay(true);
                    tokio::spawn(self.clone().ingress_conn(sock));
                }
                Err(e) => {
                    tracing::warn!("ingress accept: {e}");
                    tokio::time::sleep(Duration::from_millis(10)).await;
                }
            }
        }
    }

    async fn ingress_conn(self: Arc<Self>, sock: TcpStream) {
        let (rd, mut wr) = sock.into_split();
        let mut rd = tokio::io::BufReader::new(rd);
        let (tx, mut rx) = mpsc::unbounded_channel::<(MessageType, Vec<u8>)>();
        let writer = tokio::spawn(async move {
            while let Some((t, body)) = rx.recv().await {
                if write_frame_async(&mut wr, t, &body).await.is_err() {
                    break;
                }
            }
        });
        loop {
            let frame = match read_frame_async(&mut rd).await {
                Ok(Some(f)) => f,
                Ok(None) => break,
                Err(ProtoError::Io(_)) | Err(ProtoError::TruncatedFrame) => break,
                Err(e) => {
                    let _ = tx.send((MessageType::Error, ErrorMsg::for_error(&e).encode()));
                    break;
                }
            };
            match frame.kind_in(Scope::Ingress) {
                Ok(MessageType::IngressInvoke) => {
                    let max = self.config().max_object_bytes;
                    match parse_envelope(&frame.body, max) {
                        Ok(env) => {
                            let me = self.clone();
                            let tx = tx.clone();
                            tokio::spawn(async move {
                                let resp = me.invoke(env).await;
                                let _ = tx.send((MessageType::IngressResponse, resp.to_json()));
                            });
                        }
                        Err(e) => {
                            let id = loose_invocation_id(&frame.body);
                            let mut resp = IngressResponse::error(InvocationId([0; 16]), e.to_string());
                            resp.invocation_id = id;
                            Metrics::inc(&self.metrics.responses_error);
                            let _ = tx.send((MessageType::IngressResponse, resp.to_json()));
                        }
                    }
                }
                Ok(MessageType::StatusQuery) => {
                    let body = serde_json::to_vec(&self.metrics()).expect("metrics serialize");
                    let _ = tx.send((MessageType::StatusResponse, body));
                }
                Ok(MessageType::Error) => {}
                Ok(t) => {
                    let e = ErrorMsg {
                        code: ERR_ILLEGAL_STATE,
                        message: format!("{t:?} is not accepted on ingress"),
                    };
                    let _ = tx.send((MessageType::Error, e.encode()));
                }
                Err(e) => {
                    let _ = tx.send((MessageType::Error, ErrorMsg::for_error(&e).encode()));
                }
            }
        }
        drop(tx);
        let _ = writer.await;
    }

    // ----- invocation -----

    /// Runs one invocation attempt to its single response.
    pub async fn invoke(self: &Arc<Self>, env: InvocationEnvelope) -> IngressResponse {
        Metrics::inc(&self.metrics.invocations);
        let arrival = self.now_us();
        let id = env.invocation_id;
        let cfg = self.config();
        let resp = match cfg.function(&env.function).cloned() {
            None => IngressResponse::error(id, BackendError::UnknownFunction(env.function.clone()).to_string()),
            Some(f) => {
                let token = &f.credentials_token;
                self.credential_uses.lock().push(CredentialUse {
                    function: f.name.clone(),
                    invocation_id: id,
                    fingerprint: fnv1a64(token.as_bytes()),
                });
                match self.mode {
                    Mode::Coupled => self.invoke_coupled(&cfg, f, env, arrival).await,
                    _ => self.invoke_offloaded(&cfg, f, env, arrival).await,
                }
            }
        };
        match resp.status {
            ResponseStatus::Ok => Metrics::inc(&self.metrics.responses_ok),
            ResponseStatus::Error => Metrics::inc(&self.metrics.responses_error),
        }
        resp
    }

    fn slot_bytes(&self, cfg: &BackendConfig, env: &InvocationEnvelope) -> u64 {
        let hinted: u64 = env
            .input_hints
            .iter()
            .map(|h| align_up(h.size_bytes.unwrap_or(0), SLOT_ALIGN))
            .sum();
        let want = cfg.shmem.min_slot_bytes.max(hinted + cfg.shmem.output_reserve_bytes);
        let most = cfg
            .shmem
            .region_cap
            .saturating_sub(HEADER_BYTES + RING_CTRL_BYTES + cfg.shmem.ring_capacity + PAGE_BYTES);
        align_up(want.min(most), SLOT_ALIGN).min(most / SLOT_ALIGN * SLOT_ALIGN)
    }

    async fn invoke_offloaded(
        self: &Arc<Self>,
        cfg: &BackendConfig,
        f: FunctionConfig,
        env: InvocationEnvelope,
        arrival: u64,
    ) -> IngressResponse {
        let id = env.invocation_id;
        let env = Arc::new(env);
        let restore = cfg.restore_for(&f);
        let limiter = self.limiter(&f, f.storage_client());
        let mut tl = Timeline {
            arrival,
            ..Default::default()
        };

        let provisioned = match self
            .manager
            .provision(&f.name, self.mode, &restore, self.slot_bytes(cfg, &env), 0)
            .await
        {
            Ok(p) => p,
            Err(e) => return IngressResponse::error(id, format!("provision failed: {e}")),
        };
        tl.provision_start = self.now_us();
        let warm = provisioned.is_warm();
        let region = provisioned.sandbox().region().cloned().expect("offloaded sandboxes have a region");
        if warm {
            region.reset();
        }

        // Restore and prefetch run concurrently.
        let ready_fut = async {
            let r = match provisioned {
                Provisioned::Warm(s) => Ok(s),
                Provisioned::Cold(c) => c.ready().await,
            };
            (r, self.now_us())
        };
        let prefetch_fut = async {
            let start = self.now_us();
            let records = self.clone().prefetch_inputs(env.clone(), region.clone(), limiter.clone()).await;
            (records, start, self.now_us())
        };
        let ((ready, ready_at), (records, pf_start, pf_end)) = tokio::join!(ready_fut, prefetch_fut);
        tl.ready = ready_at;
        let sandbox = match ready {
            Ok(s) => s,
            Err(e) => return IngressResponse::error(id, format!("provision failed: {e}")),
        };
        let hinted = !env.input_hints.is_empty();
        if let Some(failed) = records.iter().find(|r| r.state == PrefetchState::Failed) {
            self.manager.return_idle(&sandbox);
            let msg = format!(
                "prefetch of {} failed: {}",
                failed.hint.object,
                failed.error.as_deref().unwrap_or("unknown")
            );
            return IngressResponse::error(id, msg);
        }
        let filled = records
            .into_iter()
            .filter_map(|r| r.grant.filter(|_| r.state == PrefetchState::Filled).map(|g| (r.hint.object, g)))
            .collect();

        let buffer = ResponseBuffer::new(id);
        let mut active = Active {
            env: env.clone(),
            region,
            limiter,
            filled,
            opaque: env.is_opaque(),
            put_grants: HashMap::new(),
            ring_put: None,
            buffer: buffer.clone(),
        };
        let mut flags = 0;
        if self.mode == Mode::OffloadedAsync {
            flags |= INVOKE_DELEGATE_WRITES;
        }
        if env.is_opaque() {
            flags |= INVOKE_OPAQUE;
        }
        let outcome = self.run_on_sandbox(&sandbox, &env, flags, &mut tl, Some(&mut active)).await;
        let fn_resp = match outcome {
            Ok(r) => r,
            Err(e) => return IngressResponse::error(id, e),
        };

        self.checkpoint(FaultPoint::PostResponsePreAck).await;
        let sandbox_id = sandbox.id;
        let _ = self.manager.release_early(&sandbox);
        tl.sandbox_released = self.now_us();
        drop(sandbox);

        let release = buffer.release().await;
        tl.last_ack = release.last_ack_us.unwrap_or(0);
        tl.release = self.now_us();

        let mut resp = self.build_response(id, &fn_resp, release.error, &tl);
        resp.sandbox_id = Some(sandbox_id);
        let b = &mut resp.breakdown_us;
        b.queue = tl.provision_start - tl.arrival;
        b.restore = if warm { 0 } else { tl.ready.saturating_sub(tl.provision_start) };
        b.prefetch = if hinted { pf_end - pf_start } else { 0 };
        b.exec = tl.fn_response.saturating_sub(tl.invoke);
        b.writeback = tl.release.saturating_sub(tl.fn_response);
        b.io_wait = pf_end.saturating_sub(tl.ready) * hinted as u64 + fn_resp.fetch_us + fn_resp.write_us;
        b.overlap = if hinted && !warm {
            tl.ready.min(pf_end).saturating_sub(tl.provision_start.max(pf_start))
        } else {
            0
        };
        b.total = tl.release - tl.arrival;
        resp
    }

    async fn invoke_coupled(
        self: &Arc<Self>,
        cfg: &BackendConfig,
        f: FunctionConfig,
        env: InvocationEnvelope,
        arrival: u64,
    ) -> IngressResponse {
        let id = env.invocation_id;
        let restore = cfg.restore_for(&f);
        let rate = per_client_rate(f.rate_limit_bps, f.clients.len());
        let mut tl = Timeline {
            arrival,
            ..Default::default()
        };
        let provisioned = match self.manager.provision(&f.name, Mode::Coupled, &restore, 0, rate).await {
            Ok(p) => p,
            Err(e) => return IngressResponse::error(id, format!("provision failed: {e}")),
        };
        tl.provision_start = self.now_us();
        let warm = provisioned.is_warm();
        let sandbox = match provisioned {
            Provisioned::Warm(s) => s,
            Provisioned::Cold(c) => match c.ready().await {
                Ok(s) => s,
                Err(e) => return IngressResponse::error(id, format!("provision failed: {e}")),
            },
        };
        tl.ready = self.now_us();
        let fn_resp = match self.run_on_sandbox(&sandbox, &env, 0, &mut tl, None).await {
            Ok(r) => r,
            Err(e) => return IngressResponse::error(id, e),
        };
        let _ = self.manager.release_early(&sandbox);
        tl.sandbox_released = self.now_us();
        tl.release = tl.sandbox_released;

        let mut resp = self.build_response(id, &fn_resp, None, &tl);
        resp.sandbox_id = Some(sandbox.id);
        let b = &mut resp.breakdown_us;
        let handler = tl.fn_response.saturating_sub(tl.invoke);
        b.queue = tl.provision_start - tl.arrival;
        b.restore = if warm { 0 } else { tl.ready - tl.provision_start };
        b.prefetch = fn_resp.fetch_us;
        b.writeback = fn_resp.write_us;
        b.exec = handler.saturating_sub(fn_resp.fetch_us + fn_resp.write_us);
        b.io_wait = fn_resp.fetch_us + fn_resp.write_us;
        b.total = tl.release - tl.arrival;
        resp
    }

    fn build_response(&self, id: InvocationId, fn_resp: &FnResponse, write_error: Option<String>, tl: &Timeline) -> IngressResponse {
        let mut resp = match (fn_resp.status, write_error) {
            (Status::Ok, None) => {
                let mut r = IngressResponse::error(id, "");
                r.status = ResponseStatus::Ok;
                r.error = None;
                r.set_payload(&fn_resp.payload);
                r
            }
            (Status::Ok, Some(e)) => IngressResponse::error(id, format!("delegated write failed: {e}")),
            (s, _) => IngressResponse::error(
                id,
                format!("handler error ({s:?}): {}", String::from_utf8_lossy(&fn_resp.payload)),
            ),
        };
        resp.timeline_us = Some(*tl);
        resp
    }

    /// Delivers INVOKE and serves the sandbox until FN_RESPONSE.
    async fn run_on_sandbox(
        &self,
        sandbox: &Arc<Sandbox>,
        env: &InvocationEnvelope,
        flags: u8,
        tl: &mut Timeline,
        mut active: Option<&mut Active>,
    ) -> Result<FnResponse, String> {
        if let Err(e) = self.manager.mark_busy(sandbox) {
            self.manager.discard(sandbox);
            return Err(e.to_string());
        }
        let mut chan = sandbox.channel().await;
        let invoke = Invoke {
            invocation_id: env.invocation_id,
            flags,
            event_body: env.event_body.clone(),
        };
        let sent = match chan.as_mut() {
            Some(c) => c.send(&invoke).await.map_err(|e| e.to_string()),
            None => Err("sandbox has no control channel".into()),
        };
        if let Err(e) = sent {
            drop(chan);
            self.manager.discard(sandbox);
            return Err(format!("sandbox {} unreachable: {e}", sandbox.id));
        }
        tl.invoke = self.now_us();
        let grace = Duration::from_millis(self.config().reconnect_grace_ms);
        let result = loop {
            let frame = match chan.as_mut().expect("channel present").recv().await {
                Ok(Some(f)) => f,
                Ok(None) | Err(ProtoError::Io(_)) | Err(ProtoError::TruncatedFrame) => {
                    if sandbox.reconnect(&mut chan, grace).await {
                        Metrics::inc(&self.metrics.channel_reconnects);
                        continue;
                    }
                    break Err(format!("sandbox {} closed its channel", sandbox.id));
                }
                Err(e) => {
                    Metrics::inc(&self.metrics.protocol_errors);
                    let _ = chan.as_mut().unwrap().send(&ErrorMsg::for_error(&e)).await;
                    continue;
                }
            };
            let conn = chan.as_mut().expect("channel present");
            let served = match frame.kind_in(Scope::Sandbox) {
                Ok(MessageType::FnResponse) => match FnResponse::decode(&frame.body) {
                    Ok(r) if r.invocation_id == env.invocation_id => break Ok(r),
                    Ok(_) => Err(ProtoError::Malformed("FN_RESPONSE for another invocation")),
                    Err(e) => Err(e),
                },
                Ok(MessageType::GetReq) => match (GetReq::decode(&frame.body), active.as_deref_mut()) {
                    (Ok(req), Some(a)) => self.handle_get(conn, a, req).await,
                    (Ok(_), None) => Err(ProtoError::Malformed("no data plane in coupled mode")),
                    (Err(e), _) => Err(e),
                },
                Ok(MessageType::PutReq) => match (PutReq::decode(&frame.body), active.as_deref_mut()) {
                    (Ok(req), Some(a)) => self.handle_put(conn, a, req).await,
                    (Ok(_), None) => Err(ProtoError::Malformed("no data plane in coupled mode")),
                    (Err(e), _) => Err(e),
                },
                Ok(MessageType::StreamOpen) => match (StreamOpen::decode(&frame.body), active.as_deref_mut()) {
                    (Ok(req), Some(a)) => self.handle_ring_put(conn, a, req).await,
                    (Ok(_), None) => Err(ProtoError::Malformed("no data plane in coupled mode")),
                    (Err(e), _) => Err(e),
                },
                Ok(MessageType::Error) => {
                    let m = ErrorMsg::decode(&frame.body).map(|m| m.message).unwrap_or_default();
                    tracing::warn!("sandbox {} reported: {m}", sandbox.id);
                    Ok(())
                }
                Ok(t) => {
                    let e = ErrorMsg {
                        code: ERR_ILLEGAL_STATE,
                        message: format!("unexpected {t:?}"),
                    };
                    conn.send(&e).await
                }
                Err(e) => Err(e),
            };
            match served {
                Ok(()) => {}
                Err(ProtoError::Io(e)) => {
                    tracing::debug!("sandbox {} write failed: {e}", sandbox.id);
                    if sandbox.reconnect(&mut chan, grace).await {
                        Metrics::inc(&self.metrics.channel_reconnects);
                        continue;
                    }
                    break Err(format!("sandbox {} channel failed: {e}", sandbox.id));
                }
                Err(e) => {
                    Metrics::inc(&self.metrics.protocol_errors);
                    let _ = chan.as_mut().unwrap().send(&ErrorMsg::for_error(&e)).await;
                }
            }
        };
        drop(chan);
        tl.fn_response = self.now_us();
        if result.is_err() {
            self.manager.discard(sandbox);
        }
        result
    }

    // ----- prefetch -----

    /// Fetches every hinted input into the region, concurrently, each through
    /// the function's rate limiter.
    async fn prefetch_inputs(
        self: Arc<Self>,
        env: Arc<InvocationEnvelope>,
        region: Arc<Region>,
        limiter: Arc<TokenBucket>,
    ) -> Vec<PrefetchRecord> {
        let mut seen = std::collections::HashSet::new();
        let mut tasks = tokio::task::JoinSet::new();
        for (i, hint) in env.input_hints.iter().enumerate() {
            if !seen.insert(hint.object.clone()) {
                continue;
            }
            let me = self.clone();
            let hint = hint.clone();
            let region = region.clone();
            let limiter = limiter.clone();
            let id = env.invocation_id;
            tasks.spawn(async move { (i, me.prefetch_one(id, hint, region, limiter).await) });
        }
        let mut out: Vec<(usize, PrefetchRecord)> = tasks.join_all().await;
        out.sort_by_key(|(i, _)| *i);
        out.into_iter().map(|(_, r)| r).collect()
    }

    async fn prefetch_one(&self, id: InvocationId, hint: InputHint, region: Arc<Region>, limiter: Arc<TokenBucket>) -> PrefetchRecord {
        let mut rec = PrefetchRecord {
            invocation_id: id,
            hint: hint.clone(),
            state: PrefetchState::Fetching,
            grant: None,
            error: None,
        };
        let early = hint.size_bytes.and_then(|s| region.grant_slot(s).ok());
        let mut stream = match self.store.get_stream(&hint.object).await {
            Ok(s) => s,
            Err(e) => {
                Metrics::inc(&self.metrics.store_gets);
                Metrics::inc(&self.metrics.prefetch_failed);
                rec.state = PrefetchState::Failed;
                rec.error = Some(e.to_string());
                return rec;
            }
        };
        Metrics::inc(&self.metrics.store_gets);
        self.checkpoint(FaultPoint::DuringPrefetch).await;
        let len = stream.len;
        if hint.size_bytes.is_some_and(|s| s != len) {
            Metrics::inc(&self.metrics.hint_mismatches);
            tracing::info!("hint for {} said {:?} bytes, object has {len}", hint.object, hint.size_bytes);
        }
        let grant = match early {
            Some(g) if len <= g.length => Ok(SlotGrant { length: len, ..g }),
            _ => region.grant_slot(len),
        };
        let grant = match grant {
            Ok(g) => g,
            Err(_) => {
                // No room; the handler's GET will fetch it on demand.
                Metrics::inc(&self.metrics.prefetch_skipped);
                rec.state = PrefetchState::Fetching;
                return rec;
            }
        };
        match self.fill_slot(&mut stream, &region, &grant, &limiter).await {
            Ok(g) => {
                Metrics::inc(&self.metrics.prefetch_filled);
                rec.state = PrefetchState::Filled;
                rec.grant = Some(g);
            }
            Err(e) => {
                Metrics::inc(&self.metrics.prefetch_failed);
                rec.state = PrefetchState::Failed;
                rec.error = Some(e.to_string());
            }
        }
        rec
    }

    /// Reads the rest of `stream` straight into the granted window.
    async fn fill_slot(
        &self,
        stream: &mut GetStream<'_>,
        region: &Region,
        grant: &SlotGrant,
        limiter: &TokenBucket,
    ) -> Result<SlotGrant, StoreError> {
        let len = grant.length;
        // SAFETY: the grant was just allocated for this transfer and is not
        // announced to the sandbox until it is filled.
        let dst = unsafe { region.window_mut(grant.offset, len) }.map_err(|e| StoreError::Protocol(e.to_string()))?;
        let mut off = 0usize;
        while off < len as usize {
            let n = CHUNK.min(len as usize - off);
            limiter.acquire(n as u64).await;
            stream.read_exact(&mut dst[off..off + n]).await?;
            off += n;
        }
        region.count_written(len);
        Metrics::add(&self.metrics.bytes_into_slots, len);
        Metrics::max(&self.metrics.peak_region_usage, region.observe_usage());
        if self.config().shmem.checksum_slots {
            region.seal(*grant).map_err(|e| StoreError::Protocol(e.to_string()))
        } else {
            Ok(*grant)
        }
    }

    // ----- GET -----

    async fn handle_get(&self, conn: &mut ControlConn, a: &mut Active, req: GetReq) -> Result<(), ProtoError> {
        let reply = |status, mode, offset, length| GetResp {
            request_id: req.request_id,
            status,
            mode,
            offset,
            length,
        };
        if let Some(g) = a.filled.get(&req.object).copied() {
            if !self.config().shmem.checksum_slots || a.region.verify_slot(&g) {
                Metrics::inc(&self.metrics.slot_hits);
                return conn.send(&reply(Status::Ok, TransferMode::Slot, g.offset, g.length)).await;
            }
            tracing::error!("slot for {} failed its checksum; fetching again", req.object);
            a.filled.remove(&req.object);
        }
        let mut stream = match self.store.get_stream(&req.object).await {
            Ok(s) => s,
            Err(e) => {
                Metrics::inc(&self.metrics.store_gets);
                let status = match e {
                    StoreError::NotFound(_) => Status::NotFound,
                    _ => Status::StoreFailed,
                };
                return conn.send(&reply(status, TransferMode::Slot, 0, 0)).await;
            }
        };
        Metrics::inc(&self.metrics.store_gets);
        let len = stream.len;
        if !a.opaque {
            if let Ok(grant) = a.region.grant_slot(len) {
                return match self.fill_slot(&mut stream, &a.region, &grant, &a.limiter).await {
                    Ok(g) => {
                        Metrics::inc(&self.metrics.sync_slot_gets);
                        a.filled.insert(req.object.clone(), g);
                        conn.send(&reply(Status::Ok, TransferMode::Slot, g.offset, g.length)).await
                    }
                    Err(_) => conn.send(&reply(Status::StoreFailed, TransferMode::Slot, 0, 0)).await,
                };
            }
        }
        let Some(ring) = a.region.ring() else {
            return conn.send(&reply(Status::Unavailable, TransferMode::Ring, 0, 0)).await;
        };
        Metrics::inc(&self.metrics.ring_gets);
        conn.send(&reply(Status::Ok, TransferMode::Ring, a.region.ring_area_offset(), len)).await?;
        let mut buf = vec![0u8; CHUNK];
        let mut sent = 0u64;
        let mut status = Status::Ok;
        'outer: while sent < len {
            let n = CHUNK.min((len - sent) as usize);
            a.limiter.acquire(n as u64).await;
            if stream.read_exact(&mut buf[..n]).await.is_err() {
                status = Status::StoreFailed;
                break;
            }
            let mut off = 0;
            let mut round = 0u32;
            let mut last_progress = Instant::now();
            while off < n {
                let w = ring.write(&buf[off..n]);
                if w > 0 {
                    off += w;
                    round = 0;
                    last_progress = Instant::now();
                    Metrics::max(&self.metrics.peak_region_usage, a.region.observe_usage());
                } else if last_progress.elapsed() > RING_STALL {
                    status = Status::Unavailable;
                    break 'outer;
                } else {
                    ring_wait(&mut round).await;
                }
            }
            sent += n as u64;
        }
        Metrics::add(&self.metrics.bytes_through_ring, sent);
        conn.send(&StreamClose {
            request_id: req.request_id,
            status,
            total: sent,
        })
        .await
    }

    // ----- PUT -----

    async fn handle_put(&self, conn: &mut ControlConn, a: &mut Active, req: PutReq) -> Result<(), ProtoError> {
        let ack = |status, offset, version| PutAck {
            request_id: req.request_id,
            status,
            offset,
            version,
        };
        match req.phase {
            PutPhase::Reserve => match a.region.grant_slot(req.length) {
                Ok(g) => {
                    Metrics::max(&self.metrics.peak_region_usage, a.region.observe_usage());
                    a.put_grants.insert(req.request_id, (req.object.clone(), req.flags, g));
                    conn.send(&ack(Status::Granted, g.offset, 0)).await
                }
                Err(_) => {
                    a.ring_put = Some((req.request_id, req.object.clone(), req.flags, req.length));
                    conn.send(&ack(Status::UseRing, 0, 0)).await
                }
            },
            PutPhase::Commit => {
                let Some((object, _, grant)) = a.put_grants.remove(&req.request_id) else {
                    return conn.send(&ack(Status::IllegalState, 0, 0)).await;
                };
                if object != req.object || grant.offset != req.offset || req.length != grant.length {
                    return conn.send(&ack(Status::IllegalState, 0, 0)).await;
                }
                let data = a
                    .region
                    .window(grant.offset, grant.length)
                    .map_err(|_| ProtoError::Malformed("PUT window"))?;
                if req.is_async() {
                    let grant = SlotGrant {
                        checksum: fnv1a64(data),
                        ..grant
                    };
                    self.delegate_write(a, object, grant, data.to_vec());
                    conn.send(&ack(Status::Delegated, grant.offset, 0)).await
                } else {
                    let (status, version) = self.write_through(a, &object, data).await;
                    conn.send(&ack(status, grant.offset, version)).await
                }
            }
        }
    }

    async fn handle_ring_put(&self, conn: &mut ControlConn, a: &mut Active, open: StreamOpen) -> Result<(), ProtoError> {
        let fail = |status| PutAck {
            request_id: open.request_id,
            status,
            offset: 0,
            version: 0,
        };
        let Some((rid, object, flags, length)) = a.ring_put.take() else {
            return conn.send(&fail(Status::IllegalState)).await;
        };
        if rid != open.request_id || length != open.length {
            return conn.send(&fail(Status::IllegalState)).await;
        }
        let Some(ring) = a.region.ring() else {
            return conn.send(&fail(Status::Unavailable)).await;
        };
        Metrics::inc(&self.metrics.ring_puts);
        let mut data = vec![0u8; length as usize];
        let mut off = 0usize;
        let mut round = 0u32;
        let mut last_progress = Instant::now();
        while off < data.len() {
            let n = ring.read_into(&mut data[off..]);
            if n > 0 {
                off += n;
                round = 0;
                last_progress = Instant::now();
                Metrics::max(&self.metrics.peak_region_usage, a.region.observe_usage());
            } else if last_progress.elapsed() > RING_STALL {
                return conn.send(&fail(Status::Unavailable)).await;
            } else {
                ring_wait(&mut round).await;
            }
        }
        Metrics::add(&self.metrics.bytes_through_ring, length);
        let close = conn.recv().await?.ok_or(ProtoError::TruncatedFrame)?;
        match close.kind_in(Scope::Sandbox)? {
            MessageType::StreamClose => {
                let c = StreamClose::decode(&close.body)?;
                if c.request_id != rid || c.status != Status::Ok || c.total != length {
                    return conn.send(&fail(Status::IllegalState)).await;
                }
            }
            _ => return conn.send(&fail(Status::IllegalState)).await,
        }
        if flags & PUT_ASYNC != 0 {
            let grant = SlotGrant {
                region_id: a.region.id(),
                offset: a.region.ring_area_offset(),
                length,
                checksum: fnv1a64(&data),
            };
            self.delegate_write(a, object, grant, data);
            conn.send(&PutAck {
                request_id: rid,
                status: Status::Delegated,
                offset: 0,
                version: 0,
            })
            .await
        } else {
            let (status, version) = self.write_through(a, &object, &data).await;
            conn.send(&PutAck {
                request_id: rid,
                status,
                offset: 0,
                version,
            })
            .await
        }
    }

    async fn write_through(&self, a: &Active, object: &ObjectRef, data: &[u8]) -> (Status, u64) {
        a.limiter.acquire(data.len() as u64).await;
        Metrics::inc(&self.metrics.store_puts);
        match self.store.put(object, data).await {
            Ok(v) => (Status::Ok, v),
            Err(e) => {
                tracing::info!("write of {object} failed: {e}");
                (Status::StoreFailed, 0)
            }
        }
    }

    /// Hands a write to a background task that drives it to the store,
    /// retrying with backoff, and reports to the response buffer.
    fn delegate_write(&self, a: &Active, object: ObjectRef, grant: SlotGrant, data: Vec<u8>) {
        Metrics::inc(&self.metrics.delegated_writes);
        let idx = a.buffer.enqueue(PendingWrite {
            invocation_id: a.env.invocation_id,
            idempotency_key: a.env.idempotency_key,
            object: object.clone(),
            grant,
            state: WriteState::Queued,
            attempts: 0,
            version: None,
            acked_at_us: None,
        });
        let buffer = a.buffer.clone();
        let limiter = a.limiter.clone();
        let store = self.store.clone();
        let wb = self.config().writeback.clone();
        let epoch = self.epoch;
        let metrics = self.metrics.clone();
        tokio::spawn(async move {
            limiter.acquire(data.len() as u64).await;
            let mut last_err = String::new();
            for attempt in 0..=wb.retries {
                if attempt > 0 {
                    Metrics::inc(&metrics.write_retries);
                    tokio::time::sleep(Duration::from_millis(wb.backoff_ms << (attempt - 1))).await;
                }
                buffer.in_flight(idx);
                Metrics::inc(&metrics.store_puts);
                match store.put(&object, &data).await {
                    Ok(v) => {
                        buffer.acked(idx, v, epoch.elapsed().as_micros() as u64);
                        return;
                    }
                    Err(e) => last_err = e.to_string(),
                }
            }
            Metrics::inc(&metrics.write_failures);
            buffer.failed(idx, format!("{object}: {last_err}"));
        });
    }
}

async fn ring_wait(round: &mut u32) {
    *round += 1;
    if *round < 32 {
        tokio::task::yield_now().await;
    } else {
        tokio::time::sleep(Duration::from_micros(200)).await;
    }
}

/// Pulls `"invocation_id"` out of a body that failed validation, so the
/// error response can still be correlated.
fn loose_invocation_id(body: &[u8]) -> String {
    serde_json::from_slice::<serde_json::Value>(body)
        .ok()
        .and_then(|v| v.get("invocation_id").and_then(|i| i.as_str()).map(str::to_string))
        .unwrap_or_default()
}
