//! Length-prefixed control-plane framing.
//!
//! A frame is `[u32 LE length][u8 msg_type][body]` where `length` counts the
//! type byte plus the body. Bulk payloads never travel in frames; the cap
//! turns an accidental bulk-in-control transfer into a hard error.

use std::io::{self, Read, Write};

use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

use super::ProtoError;

/// Largest admissible value of the length field (type byte + body).
pub const MAX_FRAME_LEN: u32 = 16 * 1024 * 1024;

/// Largest admissible body.
pub const MAX_BODY_LEN: usize = MAX_FRAME_LEN as usize - 1;

/// Which side of the backend a message belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// Ingress ↔ backend (0x01–0x0F).
    Ingress,
    /// Backend ↔ sandbox frontend (0x10–0x7F).
    Sandbox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    IngressInvoke = 0x01,
    IngressResponse = 0x02,
    StatusQuery = 0x03,
    StatusResponse = 0x04,
    Invoke = 0x10,
    GetReq = 0x11,
    GetResp = 0x12,
    PutReq = 0x13,
    PutAck = 0x14,
    FnResponse = 0x15,
    StreamOpen = 0x16,
    StreamClose = 0x17,
    Error = 0x7F,
}

impl MessageType {
    pub const ALL: [MessageType; 13] = [
        MessageType::IngressInvoke,
        MessageType::IngressResponse,
        MessageType::StatusQuery,
        MessageType::StatusResponse,
        MessageType::Invoke,
        MessageType::GetReq,
        MessageType::GetResp,
        MessageType::PutReq,
        MessageType::PutAck,
        MessageType::FnResponse,
        MessageType::StreamOpen,
        MessageType::StreamClose,
        MessageType::Error,
    ];

    pub fn scope(self) -> Scope {
        if (self as u8) < 0x10 {
            Scope::Ingress
        } else {
            Scope::Sandbox
        }
    }

    /// ERROR is the one message valid on both channels.
    pub fn allowed_in(self, scope: Scope) -> bool {
        self == MessageType::Error || self.scope() == scope
    }
}

impl TryFrom<u8> for MessageType {
    type Error = ProtoError;

    fn try_from(value: u8) -> Result<Self, ProtoError> {
        MessageType::ALL
            .iter()
            .copied()
            .find(|t| *t as u8 == value)
            .ok_or(ProtoError::UnknownType(value))
    }
}

/// A decoded frame. The type byte is kept raw so that a receiver can answer
/// an unknown type with ERROR and keep the channel open.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: u8,
    pub body: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MessageType, body: Vec<u8>) -> Self {
        Self {
            msg_type: msg_type as u8,
            body,
        }
    }

    pub fn kind(&self) -> Result<MessageType, ProtoError> {
        MessageType::try_from(self.msg_type)
    }

    /// Type check against the receiving channel's scope.
    pub fn kind_in(&self, scope: Scope) -> Result<MessageType, ProtoError> {
        let kind = self.kind()?;
        if kind.allowed_in(scope) {
            Ok(kind)
        } else {
            Err(ProtoError::WrongScope(self.msg_type))
        }
    }
}

pub fn encode_frame(msg_type: MessageType, body: &[u8]) -> Result<Vec<u8>, ProtoError> {
    encode_raw(msg_type as u8, body)
}

pub(crate) fn encode_raw(msg_type: u8, body: &[u8]) -> Result<Vec<u8>, ProtoError> {
    if body.len() > MAX_BODY_LEN {
        return Err(ProtoError::OversizeFrame(body.len() as u64 + 1));
    }
    let mut out = Vec::with_capacity(5 + body.len());
    out.extend_from_slice(&(body.len() as u32 + 1).to_le_bytes());
    out.push(msg_type);
    out.extend_from_slice(body);
    Ok(out)
}

fn check_len(len: u32) -> Result<(), ProtoError> {
    if len == 0 {
        return Err(ProtoError::EmptyFrame);
    }
    if len > MAX_FRAME_LEN {
        return Err(ProtoError::OversizeFrame(len as u64));
    }
    Ok(())
}

/// Decodes one frame from the front of `buf`, returning it with the number of
/// bytes consumed.
pub fn decode_frame(buf: &[u8]) -> Result<(Frame, usize), ProtoError> {
    if buf.len() < 4 {
        return Err(ProtoError::TruncatedFrame);
    }
    let len = u32::from_le_bytes(buf[..4].try_into().unwrap());
    check_len(len)?;
    let end = 4 + len as usize;
    if buf.len() < end {
        return Err(ProtoError::TruncatedFrame);
    }
    Ok((
        Frame {
            msg_type: buf[4],
            body: buf[5..end].to_vec(),
        },
        end,
    ))
}

/// Reads exactly one frame. Returns `Ok(None)` on a clean end-of-stream at a
/// frame boundary.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Frame>, ProtoError> {
    let mut header = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(ProtoError::TruncatedFrame),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(header);
    check_len(len)?;
    let mut rest = vec![0u8; len as usize];
    r.read_exact(&mut rest).map_err(eof_as_truncated)?;
    let body = rest.split_off(1);
    Ok(Some(Frame {
        msg_type: rest[0],
        body,
    }))
}

pub fn write_frame<W: Write>(w: &mut W, msg_type: MessageType, body: &[u8]) -> Result<(), ProtoError> {
    let bytes = encode_frame(msg_type, body)?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub async fn read_frame_async<R: AsyncRead + Unpin>(r: &mut R) -> Result<Option<Frame>, ProtoError> {
    let mut header = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut header[filled..]).await?;
        if n == 0 {
            if filled == 0 {
                return Ok(None);
            }
            return Err(ProtoError::TruncatedFrame);
        }
        filled += n;
    }
    let len = u32::from_le_bytes(header);
    check_len(len)?;
    let mut rest = vec![0u8; len as usize];
    r.read_exact(&mut rest).await.map_err(eof_as_truncated)?;
    let body = rest.split_off(1);
    Ok(Some(Frame {
        msg_type: rest[0],
        body,
    }))
}

pub async fn write_frame_async<W: AsyncWrite + Unpin>(
    w: &mut W,
    msg_type: MessageType,
    body: &[u8],
) -> Result<(), ProtoError> {
    let bytes = encode_frame(msg_type, body)?;
    w.write_all(&bytes).await?;
    w.flush().await?;
    Ok(())
}

fn eof_as_truncated(e: io::Error) -> ProtoError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        ProtoError::TruncatedFrame
    } else {
        ProtoError::Io(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_error_frame() {
        let bytes = encode_frame(MessageType::Error, &[]).unwrap();
        assert_eq!(bytes, vec![0x01, 0x00, 0x00, 0x00, 0x7F]);
        let (frame, used) = decode_frame(&bytes).unwrap();
        assert_eq!(used, 5);
        assert_eq!(frame.kind().unwrap(), MessageType::Error);
        assert!(frame.body.is_empty());
    }

    #[test]
    fn length_arithmetic() {
        let bytes = encode_frame(MessageType::GetReq, &[0xAA; 10]).unwrap();
        assert_eq!(bytes.len(), 15);
        assert_eq!(&bytes[..4], &[0x0B, 0x00, 0x00, 0x00]);
    }

    #[test]
    fn truncated_header() {
        let mut src: &[u8] = &[0x05, 0x00, 0x00];
        assert!(matches!(read_frame(&mut src), Err(ProtoError::TruncatedFrame)));
        assert!(matches!(decode_frame(&[0x05, 0x00, 0x00]), Err(ProtoError::TruncatedFrame)));
    }

    #[test]
    fn truncated_body() {
        let mut src: &[u8] = &[0x05, 0x00, 0x00, 0x00, 0x11, 0x01];
        assert!(matches!(read_frame(&mut src), Err(ProtoError::TruncatedFrame)));
    }

    #[test]
    fn oversize_declared_length() {
        let mut src: &[u8] = &[0x01, 0x00, 0x00, 0x01, 0x7F];
        assert!(matches!(
            read_frame(&mut src),
            Err(ProtoError::OversizeFrame(0x0100_0001))
        ));
    }

    #[test]
    fn max_length_is_admissible() {
        let mut header = MAX_FRAME_LEN.to_le_bytes().to_vec();
        header.push(0x7F);
        // body missing, so the length itself passed validation
        assert!(matches!(decode_frame(&header), Err(ProtoError::TruncatedFrame)));
    }

    #[test]
    fn oversize_body_rejected_on_encode() {
        let body = vec![0u8; MAX_BODY_LEN + 1];
        assert!(matches!(
            encode_frame(MessageType::PutReq, &body),
            Err(ProtoError::OversizeFrame(_))
        ));
        assert!(encode_frame(MessageType::PutReq, &body[..MAX_BODY_LEN]).is_ok());
    }

    #[test]
    fn clean_eof_is_none() {
        let mut src: &[u8] = &[];
        assert!(read_frame(&mut src).unwrap().is_none());
    }

    #[test]
    fn scopes() {
        for t in MessageType::ALL {
            let v = t as u8;
            match t.scope() {
                Scope::Ingress => assert!((0x01..=0x0F).contains(&v)),
                Scope::Sandbox => assert!((0x10..=0x7F).contains(&v)),
            }
        }
        let f = Frame::new(MessageType::GetReq, vec![]);
        assert!(matches!(f.kind_in(Scope::Ingress), Err(ProtoError::WrongScope(0x11))));
        let f = Frame::new(MessageType::Error, vec![]);
        assert!(f.kind_in(Scope::Ingress).is_ok());
        assert!(f.kind_in(Scope::Sandbox).is_ok());
        let f = Frame { msg_type: 0x55, body: vec![] };
        assert!(matches!(f.kind(), Err(ProtoError::UnknownType(0x55))));
    }

    #[tokio::test]
    async fn async_reader_matches_sync() {
        let mut buf = Vec::new();
        buf.extend(encode_frame(MessageType::Invoke, b"abc").unwrap());
        buf.extend(encode_frame(MessageType::Error, b"").unwrap());
        let mut src = &buf[..];
        let a = read_frame_async(&mut src).await.unwrap().unwrap();
        let b = read_frame_async(&mut src).await.unwrap().unwrap();
        assert_eq!(a, Frame::new(MessageType::Invoke, b"abc".to_vec()));
        assert_eq!(b, Frame::new(MessageType::Error, vec![]));
        assert!(read_frame_async(&mut src).await.unwrap().is_none());
    }
}
