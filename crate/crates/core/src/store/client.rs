//! Store clients: a pooled async client for the backend and a blocking one
//! for coupled-mode sandboxes.

use std::io::{Read, Write};
use std::net::SocketAddr;
use std::sync::Arc;

use parking_lot::Mutex;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;

use crate::proto::ObjectRef;

use super::wire::*;
use super::StoreError;

fn status_error(status: u8, object: &ObjectRef) -> StoreError {
    match status {
        ST_NOT_FOUND => StoreError::NotFound(object.clone()),
        ST_INJECTED_FAILURE => StoreError::InjectedFailure(object.clone()),
        ST_BAD_REQUEST => StoreError::Protocol("store rejected request".into()),
        s => StoreError::Protocol(format!("unknown store status {s}")),
    }
}

/// Async client with a small pool of idle connections. Each in-flight request
/// holds its own connection, so a slow transfer never blocks another.
pub struct StoreClient {
    addr: SocketAddr,
    idle: Mutex<Vec<TcpStream>>,
}

impl StoreClient {
    pub fn new(addr: SocketAddr) -> Arc<StoreClient> {
        Arc::new(StoreClient {
            addr,
            idle: Mutex::new(Vec::new()),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    async fn connect(&self) -> Result<TcpStream, StoreError> {
        let s = TcpStream::connect(self.addr).await?;
        s.set_nodelay(true)?;
        Ok(s)
    }

    fn checkin(&self, s: TcpStream) {
        let mut idle = self.idle.lock();
        if idle.len() < 64 {
            idle.push(s);
        }
    }

    /// Sends `parts` on a pooled connection, retrying once on a fresh
    /// connection if the pooled one turned out to be dead.
    async fn send(&self, parts: &[&[u8]]) -> Result<TcpStream, StoreError> {
        let pooled = self.idle.lock().pop();
        if let Some(mut s) = pooled {
            if write_parts(&mut s, parts).await.is_ok() {
                return Ok(s);
            }
        }
        let mut s = self.connect().await?;
        write_parts(&mut s, parts).await?;
        Ok(s)
    }

    /// Starts a GET and returns once the response header is in, so the
    /// caller learns the object size before any payload byte is read.
    pub async fn get_stream(&self, object: &ObjectRef) -> Result<GetStream<'_>, StoreError> {
        let req = request_header(OP_GET, object, 0);
        let mut s = self.send(&[&req]).await?;
        let (status, len) = read_response_header(&mut s).await?;
        if status != ST_OK {
            self.checkin(s);
            return Err(status_error(status, object));
        }
        Ok(GetStream {
            client: self,
            sock: Some(s),
            len,
            remaining: len,
        })
    }

    pub async fn get(&self, object: &ObjectRef) -> Result<Vec<u8>, StoreError> {
        let mut stream = self.get_stream(object).await?;
        let mut out = vec![0u8; stream.len as usize];
        stream.read_exact(&mut out).await?;
        Ok(out)
    }

    pub async fn put(&self, object: &ObjectRef, data: &[u8]) -> Result<u64, StoreError> {
        let req = request_header(OP_PUT, object, data.len());
        let mut s = self.send(&[&req, data]).await?;
        let v = read_version(&mut s, object).await;
        if !matches!(v, Err(StoreError::Io(_))) {
            self.checkin(s);
        }
        v
    }

    /// Current version of an object, without fetching it.
    pub async fn version(&self, object: &ObjectRef) -> Result<u64, StoreError> {
        let req = request_header(OP_VERSION, object, 0);
        let mut s = self.send(&[&req]).await?;
        let v = read_version(&mut s, object).await;
        if !matches!(v, Err(StoreError::Io(_))) {
            self.checkin(s);
        }
        v
    }
}

async fn write_parts(s: &mut TcpStream, parts: &[&[u8]]) -> std::io::Result<()> {
    for p in parts {
        s.write_all(p).await?;
    }
    s.flush().await
}

async fn read_response_header(s: &mut TcpStream) -> Result<(u8, u64), StoreError> {
    let mut hdr = [0u8; 5];
    s.read_exact(&mut hdr).await?;
    let len = u32::from_le_bytes(hdr[..4].try_into().unwrap()) as u64;
    if len == 0 {
        return Err(StoreError::Protocol("empty store response".into()));
    }
    Ok((hdr[4], len - 1))
}

async fn read_version(s: &mut TcpStream, object: &ObjectRef) -> Result<u64, StoreError> {
    let (status, len) = read_response_header(s).await?;
    if status != ST_OK {
        return Err(status_error(status, object));
    }
    if len != 8 {
        return Err(StoreError::Protocol("version field must be 8 bytes".into()));
    }
    let mut v = [0u8; 8];
    s.read_exact(&mut v).await?;
    Ok(u64::from_le_bytes(v))
}

/// The payload half of a GET. Dropping it early discards the connection.
pub struct GetStream<'a> {
    client: &'a StoreClient,
    sock: Option<TcpStream>,
    pub len: u64,
    remaining: u64,
}

impl GetStream<'_> {
    pub fn remaining(&self) -> u64 {
        self.remaining
    }

    /// Reads the next bytes of payload into `buf`; zero at the end.
    pub async fn read(&mut self, buf: &mut [u8]) -> Result<usize, StoreError> {
        if self.remaining == 0 {
            return Ok(0);
        }
        let sock = self.sock.as_mut().expect("socket present while bytes remain");
        let want = buf.len().min(self.remaining as usize);
        let n = sock.read(&mut buf[..want]).await?;
        if n == 0 {
            return Err(StoreError::Io(std::io::ErrorKind::UnexpectedEof.into()));
        }
        self.remaining -= n as u64;
        if self.remaining == 0 {
            self.client.checkin(self.sock.take().unwrap());
        }
        Ok(n)
    }

    pub async fn read_exact(&mut self, buf: &mut [u8]) -> Result<(), StoreError> {
        let mut off = 0;
        while off < buf.len() {
            let n = self.read(&mut buf[off..]).await?;
            if n == 0 {
                return Err(StoreError::Io(std::io::ErrorKind::UnexpectedEof.into()));
            }
            off += n;
        }
        Ok(())
    }
}

/// Blocking client over one persistent connection, reconnecting on failure.
pub struct BlockingStoreClient {
    addr: SocketAddr,
    conn: Option<std::net::TcpStream>,
}

impl BlockingStoreClient {
    pub fn new(addr: SocketAddr) -> Self {
        BlockingStoreClient { addr, conn: None }
    }

    fn conn(&mut self) -> Result<&mut std::net::TcpStream, StoreError> {
        if self.conn.is_none() {
            let s = std::net::TcpStream::connect(self.addr)?;
            s.set_nodelay(true)?;
            self.conn = Some(s);
        }
        Ok(self.conn.as_mut().unwrap())
    }

    fn roundtrip(&mut self, parts: &[&[u8]], object: &ObjectRef) -> Result<(u8, Vec<u8>), StoreError> {
        let result = (|| {
            let s = self.conn()?;
            for p in parts {
                s.write_all(p)?;
            }
            s.flush()?;
            let mut hdr = [0u8; 5];
            s.read_exact(&mut hdr)?;
            let len = u32::from_le_bytes(hdr[..4].try_into().unwrap()) as usize;
            if len == 0 {
                return Err(StoreError::Protocol("empty store response".into()));
            }
            let mut body = vec![0u8; len - 1];
            s.read_exact(&mut body)?;
            Ok((hdr[4], body))
        })();
        if matches!(result, Err(StoreError::Io(_))) {
            self.conn = None;
        }
        let (status, body) = result?;
        if status != ST_OK {
            return Err(status_error(status, object));
        }
        Ok((status, body))
    }

    pub fn get(&mut self, object: &ObjectRef) -> Result<Vec<u8>, StoreError> {
        let req = request_header(OP_GET, object, 0);
        Ok(self.roundtrip(&[&req], object)?.1)
    }

    pub fn put(&mut self, object: &ObjectRef, data: &[u8]) -> Result<u64, StoreError> {
        let req = request_header(OP_PUT, object, data.len());
        let (_, body) = self.roundtrip(&[&req, data], object)?;
        body.try_into()
            .map(u64::from_le_bytes)
            .map_err(|_| StoreError::Protocol("version field must be 8 bytes".into()))
    }

    pub fn version(&mut self, object: &ObjectRef) -> Result<u64, StoreError> {
        let req = request_header(OP_VERSION, object, 0);
        let (_, body) = self.roundtrip(&[&req], object)?;
        body.try_into()
            .map(u64::from_le_bytes)
            .map_err(|_| StoreError::Protocol("version field must be 8 bytes".into()))
    }
}
