use std::cell::RefCell;
use std::io::{self, BufRead, BufReader};
use std::os::unix::net::UnixStream;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::proto::*;
use crate::shmem::{Region, Ring};

use super::body::{Body, PayloadView, RingStream};
use super::FrontendError;

#[derive(Debug, Clone, Copy)]
pub struct AttachOptions {
    pub retries: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for AttachOptions {
    fn default() -> Self {
        AttachOptions {
            retries: 40,
            initial_backoff: Duration::from_millis(5),
            max_backoff: Duration::from_millis(200),
        }
    }
}

/// Instrumentation of payload copies made inside the frontend.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopyCounters {
    pub slot_gets: u64,
    pub ring_gets: u64,
    /// Payload copies made by the frontend while serving SLOT GETs.
    pub get_payload_copies: u64,
    pub puts: u64,
    /// Handler memory to region copies, one per PUT.
    pub put_payload_copies: u64,
    pub ring_puts: u64,
    pub transport_retries: u64,
}

impl CopyCounters {
    pub fn since(&self, earlier: &CopyCounters) -> CopyCounters {
        CopyCounters {
            slot_gets: self.slot_gets - earlier.slot_gets,
            ring_gets: self.ring_gets - earlier.ring_gets,
            get_payload_copies: self.get_payload_copies - earlier.get_payload_copies,
            puts: self.puts - earlier.puts,
            put_payload_copies: self.put_payload_copies - earlier.put_payload_copies,
            ring_puts: self.ring_puts - earlier.ring_puts,
            transport_retries: self.transport_retries - earlier.transport_retries,
        }
    }

    pub fn add(&mut self, other: &CopyCounters) {
        self.slot_gets += other.slot_gets;
        self.ring_gets += other.ring_gets;
        self.get_payload_copies += other.get_payload_copies;
        self.puts += other.puts;
        self.put_payload_copies += other.put_payload_copies;
        self.ring_puts += other.ring_puts;
        self.transport_retries += other.transport_retries;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Invocation {
    pub invocation_id: InvocationId,
    pub flags: u8,
    pub event_body: Vec<u8>,
}

impl Invocation {
    pub fn delegate_writes(&self) -> bool {
        self.flags & INVOKE_DELEGATE_WRITES != 0
    }

    pub fn opaque(&self) -> bool {
        self.flags & INVOKE_OPAQUE != 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PutOutcome {
    Stored { version: u64 },
    Delegated,
}

struct Channel {
    sock: UnixStream,
    rd: BufReader<UnixStream>,
}

impl Channel {
    fn connect(path: &Path, opts: &AttachOptions) -> io::Result<Channel> {
        let mut backoff = opts.initial_backoff;
        let mut attempt = 0;
        loop {
            match UnixStream::connect(path) {
                Ok(sock) => {
                    let rd = BufReader::with_capacity(64 * 1024, sock.try_clone()?);
                    return Ok(Channel { sock, rd });
                }
                Err(e) if attempt >= opts.retries => return Err(e),
                Err(_) => {
                    attempt += 1;
                    std::thread::sleep(backoff);
                    backoff = (backoff * 2).min(opts.max_backoff);
                }
            }
        }
    }

    fn send<M: Message>(&mut self, m: &M) -> Result<(), FrontendError> {
        write_frame(&mut self.sock, M::TYPE, &m.encode())?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Frame, FrontendError> {
        read_frame(&mut self.rd)?.ok_or_else(|| FrontendError::Transport("channel closed".into()))
    }

    /// Whether a frame has started arriving, without blocking.
    fn frame_pending(&mut self) -> Result<bool, FrontendError> {
        if !self.rd.buffer().is_empty() {
            return Ok(true);
        }
        let t = |e: io::Error| FrontendError::Transport(e.to_string());
        self.sock.set_nonblocking(true).map_err(t)?;
        let r = self.rd.fill_buf().map(|b| b.len());
        self.sock.set_nonblocking(false).map_err(t)?;
        match r {
            Ok(0) => Err(FrontendError::Transport("channel closed".into())),
            Ok(_) => Ok(true),
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => Ok(false),
            Err(e) => Err(FrontendError::Transport(e.to_string())),
        }
    }
}

/// State of a ring GET being drained by a [`RingStream`].
pub(super) struct StreamState {
    pub request_id: u64,
    pub remaining: u64,
    pub closed: bool,
}

pub(super) struct Inner {
    endpoint: PathBuf,
    opts: AttachOptions,
    chan: Channel,
    pub(super) region: Option<Arc<Region>>,
    pub(super) ring: Option<Ring>,
    next_request_id: u64,
    active: Option<Invocation>,
    pub(super) epoch: Arc<AtomicU64>,
    pub(super) counters: CopyCounters,
    pub(super) stream: Option<StreamState>,
}

/// Spin briefly, then sleep, while the other side of a ring catches up.
pub(super) fn ring_backoff(round: &mut u32) {
    *round += 1;
    if *round < 64 {
        std::thread::yield_now();
    } else {
        std::thread::sleep(Duration::from_micros(50));
    }
}

impl Inner {
    fn reconnect(&mut self) -> Result<(), FrontendError> {
        self.chan = Channel::connect(&self.endpoint, &self.opts).map_err(|e| FrontendError::Transport(e.to_string()))?;
        self.counters.transport_retries += 1;
        Ok(())
    }

    fn next_id(&mut self) -> u64 {
        self.next_request_id += 1;
        self.next_request_id
    }

    fn expect<M: Message>(&mut self, request_id: impl Fn(&M) -> u64, want: u64) -> Result<M, FrontendError> {
        loop {
            let frame = self.chan.recv()?;
            match frame.kind_in(Scope::Sandbox) {
                Ok(t) if t == M::TYPE => {
                    let m = M::decode(&frame.body)?;
                    if request_id(&m) == want {
                        return Ok(m);
                    }
                    tracing::warn!("dropping stale {:?} for request {}", t, request_id(&m));
                }
                Ok(MessageType::Error) => {
                    let e = ErrorMsg::decode(&frame.body)?;
                    return Err(FrontendError::Protocol(e.message));
                }
                Ok(t) => return Err(FrontendError::Protocol(format!("unexpected {t:?}"))),
                Err(e) => {
                    self.chan.send(&ErrorMsg::for_error(&e))?;
                }
            }
        }
    }

    /// Runs `op`, and once more on a fresh connection if the channel broke.
    fn with_retry<T>(&mut self, mut op: impl FnMut(&mut Inner) -> Result<T, FrontendError>) -> Result<T, FrontendError> {
        match op(self) {
            Err(FrontendError::Transport(e)) => {
                tracing::debug!("control channel failed ({e}); reconnecting");
                self.reconnect()?;
                op(self)
            }
            r => r,
        }
    }

    /// Drains whatever is left of an unfinished ring stream so the channel
    /// is back at a message boundary.
    pub(super) fn finish_stream(&mut self) -> Result<(), FrontendError> {
        let mut buf = vec![0u8; 64 * 1024];
        while self.stream.is_some() {
            self.stream_read(&mut buf)?;
        }
        Ok(())
    }

    pub(super) fn stream_read(&mut self, buf: &mut [u8]) -> Result<usize, FrontendError> {
        let ring = self.ring.clone().ok_or(FrontendError::IllegalState("region has no ring"))?;
        let mut round = 0;
        loop {
            let Some(st) = self.stream.as_mut() else {
                return Ok(0);
            };
            if st.remaining == 0 {
                if !st.closed {
                    let rid = st.request_id;
                    let close: StreamClose = self.expect(|c: &StreamClose| c.request_id, rid)?;
                    if close.status != Status::Ok {
                        self.stream = None;
                        return Err(FrontendError::Transport(format!("stream aborted: {:?}", close.status)));
                    }
                }
                self.stream = None;
                return Ok(0);
            }
            let want = buf.len().min(st.remaining as usize);
            let n = ring.read_into(&mut buf[..want]);
            if n > 0 {
                st.remaining -= n as u64;
                return Ok(n);
            }
            if !st.closed && self.chan.frame_pending()? {
                let rid = st.request_id;
                let close: StreamClose = self.expect(|c: &StreamClose| c.request_id, rid)?;
                if close.status != Status::Ok {
                    self.stream = None;
                    return Err(FrontendError::Transport(format!("stream aborted: {:?}", close.status)));
                }
                if let Some(st) = self.stream.as_mut() {
                    st.closed = true;
                }
                continue;
            }
            ring_backoff(&mut round);
        }
    }

    fn require_active(&self) -> Result<(), FrontendError> {
        if self.active.is_none() {
            return Err(FrontendError::IllegalState("no invocation active"));
        }
        Ok(())
    }
}

/// One sandbox's connection to the backend.
pub struct ClientSession {
    sandbox_id: u64,
    inner: Rc<RefCell<Inner>>,
}

impl ClientSession {
    /// Maps the region (when the sandbox has one) and connects the control
    /// channel, retrying the connect with backoff.
    pub fn attach(endpoint: &Path, region_path: Option<&Path>, sandbox_id: u64) -> Result<ClientSession, FrontendError> {
        Self::attach_with(endpoint, region_path, sandbox_id, AttachOptions::default())
    }

    pub fn attach_with(
        endpoint: &Path,
        region_path: Option<&Path>,
        sandbox_id: u64,
        opts: AttachOptions,
    ) -> Result<ClientSession, FrontendError> {
        let region = match region_path {
            Some(p) => Some(Arc::new(Region::attach(p).map_err(|e| FrontendError::Attach(e.to_string()))?)),
            None => None,
        };
        let ring = region.as_ref().and_then(|r| r.ring());
        let chan = Channel::connect(endpoint, &opts).map_err(|e| FrontendError::Attach(format!("{}: {e}", endpoint.display())))?;
        Ok(ClientSession {
            sandbox_id,
            inner: Rc::new(RefCell::new(Inner {
                endpoint: endpoint.to_path_buf(),
                opts,
                chan,
                region,
                ring,
                next_request_id: 0,
                active: None,
                epoch: Arc::new(AtomicU64::new(0)),
                counters: CopyCounters::default(),
                stream: None,
            })),
        })
    }

    pub fn sandbox_id(&self) -> u64 {
        self.sandbox_id
    }

    pub fn counters(&self) -> CopyCounters {
        self.inner.borrow().counters
    }

    pub fn active(&self) -> Option<Invocation> {
        self.inner.borrow().active.clone()
    }

    /// Blocks until the next INVOKE. `None` once the backend closes the
    /// channel, which is the sandbox's signal to exit.
    pub fn next_invocation(&mut self) -> Result<Option<Invocation>, FrontendError> {
        let mut inner = self.inner.borrow_mut();
        if inner.active.is_some() {
            return Err(FrontendError::IllegalState("invocation already active"));
        }
        loop {
            let frame = match read_frame(&mut inner.chan.rd) {
                Ok(Some(f)) => f,
                Ok(None) => return Ok(None),
                Err(ProtoError::Io(e)) if e.kind() == io::ErrorKind::ConnectionReset => return Ok(None),
                Err(e) => return Err(e.into()),
            };
            match frame.kind_in(Scope::Sandbox) {
                Ok(MessageType::Invoke) => {
                    let m = Invoke::decode(&frame.body)?;
                    let inv = Invocation {
                        invocation_id: m.invocation_id,
                        flags: m.flags,
                        event_body: m.event_body,
                    };
                    inner.active = Some(inv.clone());
                    return Ok(Some(inv));
                }
                Ok(MessageType::Error) => {
                    let e = ErrorMsg::decode(&frame.body)?;
                    tracing::warn!("backend reported error: {}", e.message);
                }
                Ok(t) => {
                    let msg = ErrorMsg {
                        code: ERR_ILLEGAL_STATE,
                        message: format!("{t:?} while idle"),
                    };
                    inner.chan.send(&msg)?;
                }
                Err(e) => {
                    inner.chan.send(&ErrorMsg::for_error(&e))?;
                }
            }
        }
    }

    /// Remoted GET. Returns a view over the region when the backend placed
    /// the object in a slot, or a stream over the ring otherwise.
    pub fn get_object(&mut self, object: &ObjectRef) -> Result<Body, FrontendError> {
        let resp = {
            let mut inner = self.inner.borrow_mut();
            inner.require_active()?;
            inner.finish_stream()?;
            let rid = inner.next_id();
            inner.with_retry(|i| {
                i.chan.send(&GetReq {
                    request_id: rid,
                    object: object.clone(),
                })?;
                i.expect(|r: &GetResp| r.request_id, rid)
            })?
        };
        match resp.status {
            Status::Ok => {}
            Status::NotFound => return Err(FrontendError::NotFound(object.clone())),
            status => {
                return Err(FrontendError::Store {
                    object: object.clone(),
                    status,
                })
            }
        }
        let mut inner = self.inner.borrow_mut();
        match resp.mode {
            TransferMode::Slot => {
                let region = inner.region.clone().ok_or(FrontendError::IllegalState("no region attached"))?;
                region.window(resp.offset, resp.length)?;
                inner.counters.slot_gets += 1;
                let view = PayloadView::new(region, resp.offset, resp.length, inner.epoch.clone());
                Ok(Body::view(view))
            }
            TransferMode::Ring => {
                if inner.ring.is_none() {
                    return Err(FrontendError::IllegalState("region has no ring"));
                }
                inner.counters.ring_gets += 1;
                inner.stream = Some(StreamState {
                    request_id: resp.request_id,
                    remaining: resp.length,
                    closed: false,
                });
                drop(inner);
                Ok(Body::Stream(RingStream::new(self.inner.clone(), resp.request_id, resp.length)))
            }
        }
    }

    /// Remoted PUT. The payload is copied once, from `data` into the region
    /// (a slot, or the ring when the backend has no room).
    pub fn put_object(&mut self, object: &ObjectRef, data: &[u8], delegate: bool) -> Result<PutOutcome, FrontendError> {
        let mut inner = self.inner.borrow_mut();
        inner.require_active()?;
        inner.finish_stream()?;
        let flags = if delegate { PUT_ASYNC } else { 0 };
        let rid = inner.next_id();
        let ack = inner.with_retry(|i| put_once(i, rid, object, data, flags))?;
        inner.counters.puts += 1;
        inner.counters.put_payload_copies += 1;
        match ack.status {
            Status::Ok => Ok(PutOutcome::Stored { version: ack.version }),
            Status::Delegated => Ok(PutOutcome::Delegated),
            status => Err(FrontendError::Store {
                object: object.clone(),
                status,
            }),
        }
    }

    /// Sends FN_RESPONSE and ends the invocation. Every view handed out
    /// during the invocation becomes invalid.
    pub fn respond(&mut self, status: Status, payload: &[u8], fetch_us: u64, compute_us: u64, write_us: u64) -> Result<(), FrontendError> {
        if payload.len() > MAX_EVENT_BODY {
            return Err(FrontendError::PayloadTooLarge(payload.len()));
        }
        let mut inner = self.inner.borrow_mut();
        let inv = inner.active.clone().ok_or(FrontendError::IllegalState("no invocation active"))?;
        inner.finish_stream()?;
        let msg = FnResponse {
            invocation_id: inv.invocation_id,
            status,
            fetch_us,
            compute_us,
            write_us,
            payload: payload.to_vec(),
        };
        inner.with_retry(|i| i.chan.send(&msg))?;
        inner.epoch.fetch_add(1, Ordering::AcqRel);
        inner.active = None;
        Ok(())
    }
}

fn put_once(i: &mut Inner, rid: u64, object: &ObjectRef, data: &[u8], flags: u8) -> Result<PutAck, FrontendError> {
    i.chan.send(&PutReq {
        request_id: rid,
        phase: PutPhase::Reserve,
        flags,
        offset: 0,
        length: data.len() as u64,
        object: object.clone(),
    })?;
    let grant = i.expect(|a: &PutAck| a.request_id, rid)?;
    match grant.status {
        Status::Granted => {
            let region = i.region.clone().ok_or(FrontendError::IllegalState("no region attached"))?;
            // SAFETY: the backend granted this window to this request only and
            // will not read it before COMMIT.
            let dst = unsafe { region.window_mut(grant.offset, data.len() as u64)? };
            dst.copy_from_slice(data);
            i.chan.send(&PutReq {
                request_id: rid,
                phase: PutPhase::Commit,
                flags,
                offset: grant.offset,
                length: data.len() as u64,
                object: object.clone(),
            })?;
            i.expect(|a: &PutAck| a.request_id, rid)
        }
        Status::UseRing => {
            let ring = i.ring.clone().ok_or(FrontendError::IllegalState("region has no ring"))?;
            i.counters.ring_puts += 1;
            i.chan.send(&StreamOpen {
                request_id: rid,
                length: data.len() as u64,
            })?;
            let mut off = 0;
            let mut round = 0;
            while off < data.len() {
                let n = ring.write(&data[off..]);
                if n == 0 {
                    if i.chan.frame_pending()? {
                        // the backend gave up on the upload
                        return i.expect(|a: &PutAck| a.request_id, rid);
                    }
                    ring_backoff(&mut round);
                } else {
                    off += n;
                    round = 0;
                }
            }
            i.chan.send(&StreamClose {
                request_id: rid,
                status: Status::Ok,
                total: data.len() as u64,
            })?;
            i.expect(|a: &PutAck| a.request_id, rid)
        }
        _ => Ok(grant),
    }
}

