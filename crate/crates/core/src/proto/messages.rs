//! Binary bodies of the sandbox-scope messages. Little-endian throughout;
//! PROTOCOL.md documents every field.

use super::envelope::{InvocationId, ObjectRef};
use super::frame::MessageType;
use super::ProtoError;

/// INVOKE flag: the platform delegates output writes (async writeback).
pub const INVOKE_DELEGATE_WRITES: u8 = 0x01;
/// INVOKE flag: the invocation carried no hints; every GET streams.
pub const INVOKE_OPAQUE: u8 = 0x02;

/// PUT_REQ flag: delegate the write and return before the store acks.
pub const PUT_ASYNC: u8 = 0x01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    NotFound = 1,
    StoreFailed = 2,
    Delegated = 3,
    Granted = 4,
    UseRing = 5,
    IllegalState = 6,
    Unavailable = 7,
    /// The handler itself failed.
    HandlerError = 8,
}

impl TryFrom<u8> for Status {
    type Error = ProtoError;
    fn try_from(v: u8) -> Result<Self, ProtoError> {
        Ok(match v {
            0 => Status::Ok,
            1 => Status::NotFound,
            2 => Status::StoreFailed,
            3 => Status::Delegated,
            4 => Status::Granted,
            5 => Status::UseRing,
            6 => Status::IllegalState,
            7 => Status::Unavailable,
            8 => Status::HandlerError,
            _ => return Err(ProtoError::Malformed("status")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum TransferMode {
    Slot = 0,
    Ring = 1,
}

impl TryFrom<u8> for TransferMode {
    type Error = ProtoError;
    fn try_from(v: u8) -> Result<Self, ProtoError> {
        match v {
            0 => Ok(TransferMode::Slot),
            1 => Ok(TransferMode::Ring),
            _ => Err(ProtoError::Malformed("mode")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum PutPhase {
    /// Ask the backend for a slot of `length` bytes.
    Reserve = 0,
    /// The slot at `offset` holds the payload; perform the write.
    Commit = 1,
}

impl TryFrom<u8> for PutPhase {
    type Error = ProtoError;
    fn try_from(v: u8) -> Result<Self, ProtoError> {
        match v {
            0 => Ok(PutPhase::Reserve),
            1 => Ok(PutPhase::Commit),
            _ => Err(ProtoError::Malformed("phase")),
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn new() -> Self {
        Writer(Vec::with_capacity(64))
    }
    fn u8(mut self, v: u8) -> Self {
        self.0.push(v);
        self
    }
    fn u16(mut self, v: u16) -> Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    fn u32(mut self, v: u32) -> Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    fn u64(mut self, v: u64) -> Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    fn bytes(mut self, v: &[u8]) -> Self {
        self.0.extend_from_slice(v);
        self
    }
    fn str16(self, s: &str) -> Self {
        self.u16(s.len() as u16).bytes(s.as_bytes())
    }
    fn object(self, r: &ObjectRef) -> Self {
        self.str16(r.bucket()).str16(r.key())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, what }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtoError> {
        if self.buf.len() < n {
            return Err(ProtoError::Malformed(self.what));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8, ProtoError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, ProtoError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, ProtoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ProtoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn id(&mut self) -> Result<InvocationId, ProtoError> {
        Ok(InvocationId(self.take(16)?.try_into().unwrap()))
    }
    fn str16(&mut self) -> Result<String, ProtoError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ProtoError::Malformed(self.what))
    }
    fn object(&mut self) -> Result<ObjectRef, ProtoError> {
        let bucket = self.str16()?;
        let key = self.str16()?;
        ObjectRef::new(bucket, key)
    }
    fn finish(self) -> Result<(), ProtoError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(ProtoError::Malformed(self.what))
        }
    }
}

/// One sandbox-scope message body, typed.
pub trait Message: Sized {
    const TYPE: MessageType;
    fn encode(&self) -> Vec<u8>;
    fn decode(body: &[u8]) -> Result<Self, ProtoError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Invoke {
    pub invocation_id: InvocationId,
    pub flags: u8,
    pub event_body: Vec<u8>,
}

impl Message for Invoke {
    const TYPE: MessageType = MessageType::Invoke;
    fn encode(&self) -> Vec<u8> {
        Writer::new()
            .bytes(&self.invocation_id.0)
            .u8(self.flags)
            .u32(self.event_body.len() as u32)
            .bytes(&self.event_body)
            .0
    }
    fn decode(body: &[u8]) -> Result<Self, ProtoError> {
        let mut r = Reader::new(body, "INVOKE");
        let invocation_id = r.id()?;
        let flags = r.u8()?;
        let n = r.u32()? as usize;
        let event_body = r.take(n)?.to_vec();
        r.finish()?;
        Ok(Invoke {
            invocation_id,
            flags,
            event_body,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GetReq {
    pub request_id: u64,
    pub object: ObjectRef,
}

impl Message for GetReq {
    const TYPE: MessageType = MessageType::GetReq;
    fn encode(&self) -> Vec<u8> {
        Writer::new().u64(self.request_id).object(&self.object).0
    }
    fn decode(body: &[u8]) -> Result<Self, ProtoError> {
        let mut r = Reader::new(body, "GET_REQ");
        let request_id = r.u64()?;
        let object = r.object()?;
        r.finish()?;
        Ok(GetReq { request_id, object })
    }
}

/// `(request_id u64, status u8, mode u8, offset u64, length u64)`, 26 bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GetResp {
    pub request_id: u64,
    pub status: Status,
    pub mode: TransferMode,
    pub offset: u64,
    pub length: u64,
}

impl Message for GetResp {
    const TYPE: MessageType = MessageType::GetResp;
    fn encode(&self) -> Vec<u8> {
        Writer::new()
            .u64(self.request_id)
            .u8(self.status as u8)
            .u8(self.mode as u8)
            .u64(self.offset)
            .u64(self.length)
            .0
    }
    fn decode(body: &[u8]) -> Result<Self, ProtoError> {
        let mut r = Reader::new(body, "GET_RESP");
        let out = GetResp {
            request_id: r.u64()?,
            status: Status::try_from(r.u8()?)?,
            mode: TransferMode::try_from(r.u8()?)?,
            offset: r.u64()?,
            length: r.u64()?,
        };
        r.finish()?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PutReq {
    pub request_id: u64,
    pub phase: PutPhase,
    pub flags: u8,
    pub offset: u64,
    pub length: u64,
    pub object: ObjectRef,
}

impl PutReq {
    pub fn is_async(&self) -> bool {
        self.flags & PUT_ASYNC != 0
    }
}

impl Message for PutReq {
    const TYPE: MessageType = MessageType::PutReq;
    fn encode(&self) -> Vec<u8> {
        Writer::new()
            .u64(self.request_id)
            .u8(self.phase as u8)
            .u8(self.flags)
            .u64(self.offset)
            .u64(self.length)
            .object(&self.object)
            .0
    }
    fn decode(body: &[u8]) -> Result<Self, ProtoError> {
        let mut r = Reader::new(body, "PUT_REQ");
        let out = PutReq {
            request_id: r.u64()?,
            phase: PutPhase::try_from(r.u8()?)?,
            flags: r.u8()?,
            offset: r.u64()?,
            length: r.u64()?,
            object: r.object()?,
        };
        r.finish()?;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PutAck {
    pub request_id: u64,
    pub status: Status,
    pub offset: u64,
    pub version: u64,
}

impl Message for PutAck {
    const TYPE: MessageType = MessageType::PutAck;
    fn encode(&self) -> Vec<u8> {
        Writer::new()
            .u64(self.request_id)
            .u8(self.status as u8)
            .u64(self.offset)
            .u64(self.version)
            .0
    }
    fn decode(body: &[u8]) -> Result<Self, ProtoError> {
        let mut r = Reader::new(body, "PUT_ACK");
        let out = PutAck {
            request_id: r.u64()?,
            status: Status::try_from(r.u8()?)?,
            offset: r.u64()?,
            version: r.u64()?,
        };
        r.finish()?;
        Ok(out)
    }
}

/// The handler's final answer, with handler-side phase timings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FnResponse {
    pub invocation_id: InvocationId,
    pub status: Status,
    pub fetch_us: u64,
    pub compute_us: u64,
    pub write_us: u64,
    pub payload: Vec<u8>,
}

impl Message for FnResponse {
    const TYPE: MessageType = MessageType::FnResponse;
    fn encode(&self) -> Vec<u8> {
        Writer::new()
            .bytes(&self.invocation_id.0)
            .u8(self.status as u8)
            .u64(self.fetch_us)
            .u64(self.compute_us)
            .u64(self.write_us)
            .u32(self.payload.len() as u32)
            .bytes(&self.payload)
            .0
    }
    fn decode(body: &[u8]) -> Result<Self, ProtoError> {
        let mut r = Reader::new(body, "FN_RESPONSE");
        let invocation_id = r.id()?;
        let status = Status::try_from(r.u8()?)?;
        let fetch_us = r.u64()?;
        let compute_us = r.u64()?;
        let write_us = r.u64()?;
        let n = r.u32()? as usize;
        let payload = r.take(n)?.to_vec();
        r.finish()?;
        Ok(FnResponse {
            invocation_id,
            status,
            fetch_us,
            compute_us,
            write_us,
            payload,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamOpen {
    pub request_id: u64,
    pub length: u64,
}

impl Message for StreamOpen {
    const TYPE: MessageType = MessageType::StreamOpen;
    fn encode(&self) -> Vec<u8> {
        Writer::new().u64(self.request_id).u64(self.length).0
    }
    fn decode(body: &[u8]) -> Result<Self, ProtoError> {
        let mut r = Reader::new(body, "STREAM_OPEN");
        let out = StreamOpen {
            request_id: r.u64()?,
            length: r.u64()?,
        };
        r.finish()?;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamClose {
    pub request_id: u64,
    pub status: Status,
    pub total: u64,
}

impl Message for StreamClose {
    const TYPE: MessageType = MessageType::StreamClose;
    fn encode(&self) -> Vec<u8> {
        Writer::new().u64(self.request_id).u8(self.status as u8).u64(self.total).0
    }
    fn decode(body: &[u8]) -> Result<Self, ProtoError> {
        let mut r = Reader::new(body, "STREAM_CLOSE");
        let out = StreamClose {
            request_id: r.u64()?,
            status: Status::try_from(r.u8()?)?,
            total: r.u64()?,
        };
        r.finish()?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorMsg {
    pub code: u8,
    pub message: String,
}

pub const ERR_UNKNOWN_TYPE: u8 = 1;
pub const ERR_WRONG_SCOPE: u8 = 2;
pub const ERR_MALFORMED: u8 = 3;
pub const ERR_ILLEGAL_STATE: u8 = 4;

impl Message for ErrorMsg {
    const TYPE: MessageType = MessageType::Error;
    fn encode(&self) -> Vec<u8> {
        Writer::new().u8(self.code).bytes(self.message.as_bytes()).0
    }
    fn decode(body: &[u8]) -> Result<Self, ProtoError> {
        let mut r = Reader::new(body, "ERROR");
        let code = r.u8()?;
        let message = String::from_utf8_lossy(r.buf).into_owned();
        Ok(ErrorMsg { code, message })
    }
}

impl ErrorMsg {
    pub fn for_error(err: &ProtoError) -> Self {
        let code = match err {
            ProtoError::UnknownType(_) => ERR_UNKNOWN_TYPE,
            ProtoError::WrongScope(_) => ERR_WRONG_SCOPE,
            _ => ERR_MALFORMED,
        };
        ErrorMsg {
            code,
            message: err.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj() -> ObjectRef {
        ObjectRef::new("bucket", "some/key").unwrap()
    }

    #[test]
    fn get_resp_is_26_bytes() {
        let m = GetResp {
            request_id: 9,
            status: Status::Ok,
            mode: TransferMode::Ring,
            offset: 64,
            length: 1 << 20,
        };
        let body = m.encode();
        assert_eq!(body.len(), 26);
        assert_eq!(body[8], 0);
        assert_eq!(body[9], 1);
        assert_eq!(GetResp::decode(&body).unwrap(), m);
    }

    #[test]
    fn every_message_decodes_what_it_encodes() {
        let id = InvocationId([3; 16]);
        let inv = Invoke {
            invocation_id: id,
            flags: INVOKE_DELEGATE_WRITES,
            event_body: b"{}".to_vec(),
        };
        assert_eq!(Invoke::decode(&inv.encode()).unwrap(), inv);
        let g = GetReq {
            request_id: 1,
            object: obj(),
        };
        assert_eq!(GetReq::decode(&g.encode()).unwrap(), g);
        let p = PutReq {
            request_id: 2,
            phase: PutPhase::Commit,
            flags: PUT_ASYNC,
            offset: 128,
            length: 77,
            object: obj(),
        };
        assert_eq!(PutReq::decode(&p.encode()).unwrap(), p);
        assert!(p.is_async());
        let a = PutAck {
            request_id: 2,
            status: Status::Delegated,
            offset: 0,
            version: 0,
        };
        assert_eq!(PutAck::decode(&a.encode()).unwrap(), a);
        let f = FnResponse {
            invocation_id: id,
            status: Status::Ok,
            fetch_us: 1,
            compute_us: 2,
            write_us: 3,
            payload: vec![1, 2, 3],
        };
        assert_eq!(FnResponse::decode(&f.encode()).unwrap(), f);
        let o = StreamOpen {
            request_id: 5,
            length: 99,
        };
        assert_eq!(StreamOpen::decode(&o.encode()).unwrap(), o);
        let c = StreamClose {
            request_id: 5,
            status: Status::Ok,
            total: 99,
        };
        assert_eq!(StreamClose::decode(&c.encode()).unwrap(), c);
        let e = ErrorMsg {
            code: ERR_UNKNOWN_TYPE,
            message: "unknown".into(),
        };
        assert_eq!(ErrorMsg::decode(&e.encode()).unwrap(), e);
    }

    #[test]
    fn trailing_or_short_bodies_rejected() {
        let mut body = GetReq {
            request_id: 1,
            object: obj(),
        }
        .encode();
        body.push(0);
        assert!(matches!(GetReq::decode(&body), Err(ProtoError::Malformed("GET_REQ"))));
        assert!(GetResp::decode(&[0; 25]).is_err());
        assert!(PutAck::decode(&[0; 10]).is_err());
    }

    #[test]
    fn bad_enum_bytes_rejected() {
        let mut body = GetResp {
            request_id: 1,
            status: Status::Ok,
            mode: TransferMode::Slot,
            offset: 0,
            length: 0,
        }
        .encode();
        body[9] = 7;
        assert!(GetResp::decode(&body).is_err());
    }
}
