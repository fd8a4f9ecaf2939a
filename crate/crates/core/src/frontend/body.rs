use std::cell::RefCell;
use std::io::{self, Read};
use std::ops::Deref;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::shmem::{Fnv1a64, Region};

use super::session::Inner;

/// Read-only window over a GET slot, valid until the invocation responds.
pub struct PayloadView {
    region: Arc<Region>,
    offset: u64,
    len: u64,
    epoch: Arc<AtomicU64>,
    born: u64,
}

impl PayloadView {
    pub(super) fn new(region: Arc<Region>, offset: u64, len: u64, epoch: Arc<AtomicU64>) -> PayloadView {
        let born = epoch.load(Ordering::Acquire);
        PayloadView {
            region,
            offset,
            len,
            epoch,
            born,
        }
    }

    pub fn region_id(&self) -> u64 {
        self.region.id()
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// False once the invocation that produced the view has responded.
    pub fn is_valid(&self) -> bool {
        self.epoch.load(Ordering::Acquire) == self.born
    }
}

impl Deref for PayloadView {
    type Target = [u8];
    fn deref(&self) -> &[u8] {
        debug_assert!(self.is_valid(), "payload view used after respond");
        self.region.window(self.offset, self.len).expect("view was bounds-checked at creation")
    }
}

impl std::fmt::Debug for PayloadView {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PayloadView")
            .field("region", &self.region.id())
            .field("offset", &self.offset)
            .field("len", &self.len)
            .finish()
    }
}

/// Pull-based reader over a ring GET. Reading past the end consumes the
/// closing message; dropping it early leaves the rest to be discarded by the
/// session's next call.
pub struct RingStream {
    inner: Rc<RefCell<Inner>>,
    request_id: u64,
    len: u64,
}

impl RingStream {
    pub(super) fn new(inner: Rc<RefCell<Inner>>, request_id: u64, len: u64) -> Self {
        RingStream { inner, request_id, len }
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl Read for RingStream {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let mut inner = self.inner.borrow_mut();
        match inner.stream.as_ref() {
            Some(st) if st.request_id == self.request_id => {}
            _ => return Ok(0),
        }
        inner.stream_read(buf).map_err(io::Error::other)
    }
}

/// An object body as seen by a handler.
pub enum Body {
    View { view: PayloadView, pos: usize },
    Stream(RingStream),
    Owned { data: Vec<u8>, pos: usize },
}

impl Body {
    pub(super) fn view(view: PayloadView) -> Body {
        Body::View { view, pos: 0 }
    }

    pub fn owned(data: Vec<u8>) -> Body {
        Body::Owned { data, pos: 0 }
    }

    pub fn len(&self) -> u64 {
        match self {
            Body::View { view, .. } => view.len(),
            Body::Stream(s) => s.len(),
            Body::Owned { data, .. } => data.len() as u64,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The whole body as one contiguous slice, when it already is one.
    pub fn as_slice(&self) -> Option<&[u8]> {
        match self {
            Body::View { view, .. } => Some(view),
            Body::Owned { data, .. } => Some(data),
            Body::Stream(_) => None,
        }
    }

    /// FNV-1a-64 of the remaining bytes, without buffering a stream.
    pub fn checksum(&mut self) -> io::Result<u64> {
        if let Some(s) = self.as_slice() {
            return Ok(crate::shmem::fnv1a64(s));
        }
        let mut h = Fnv1a64::new();
        let mut buf = vec![0u8; 256 * 1024];
        loop {
            let n = self.read(&mut buf)?;
            if n == 0 {
                return Ok(h.finish());
            }
            h.write(&buf[..n]);
        }
    }

    pub fn into_vec(mut self) -> io::Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.len() as usize);
        self.read_to_end(&mut out)?;
        Ok(out)
    }
}

impl Read for Body {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        match self {
            Body::View { view, pos } => {
                let src = &view[*pos..];
                let n = src.len().min(buf.len());
                buf[..n].copy_from_slice(&src[..n]);
                *pos += n;
                Ok(n)
            }
            Body::Owned { data, pos } => {
                let src = &data[*pos..];
                let n = src.len().min(buf.len());
                buf[..n].copy_from_slice(&src[..n]);
                *pos += n;
                Ok(n)
            }
            Body::Stream(s) => s.read(buf),
        }
    }
}

impl std::fmt::Debug for Body {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Body::View { view, .. } => write!(f, "Body::View({view:?})"),
            Body::Stream(s) => write!(f, "Body::Stream({} bytes)", s.len()),
            Body::Owned { data, .. } => write!(f, "Body::Owned({} bytes)", data.len()),
        }
    }
}
