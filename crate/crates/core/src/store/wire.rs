//! Store protocol.
//!
//! ```text
//! request  = [u32 LE length][u8 op][u16 bucket_len][bucket][u16 key_len][key][payload for PUT]
//! response = [u32 LE length][u8 status][payload for GET | u64 LE version for PUT/VERSION]
//! ```
//!
//! `length` counts every byte after the length field itself.

use crate::proto::ObjectRef;

use super::StoreError;

pub const OP_GET: u8 = 1;
pub const OP_PUT: u8 = 2;
/// Returns the current version of an object without its data.
pub const OP_VERSION: u8 = 3;

pub const ST_OK: u8 = 0;
pub const ST_NOT_FOUND: u8 = 1;
pub const ST_INJECTED_FAILURE: u8 = 2;
pub const ST_BAD_REQUEST: u8 = 3;

/// Upper bound on one request or response, to keep a corrupt length field
/// from allocating unbounded memory.
pub const MAX_MESSAGE: u64 = 2 * 1024 * 1024 * 1024;

pub fn request_header(op: u8, object: &ObjectRef, payload_len: usize) -> Vec<u8> {
    let b = object.bucket().as_bytes();
    let k = object.key().as_bytes();
    let len = 1 + 2 + b.len() + 2 + k.len() + payload_len;
    let mut out = Vec::with_capacity(4 + len - payload_len);
    out.extend_from_slice(&(len as u32).to_le_bytes());
    out.push(op);
    out.extend_from_slice(&(b.len() as u16).to_le_bytes());
    out.extend_from_slice(b);
    out.extend_from_slice(&(k.len() as u16).to_le_bytes());
    out.extend_from_slice(k);
    out
}

/// Splits a request body (everything after the length field) into op,
/// object, and payload.
pub fn parse_request(body: &[u8]) -> Result<(u8, ObjectRef, &[u8]), StoreError> {
    let bad = || StoreError::Protocol("malformed request".into());
    let (&op, rest) = body.split_first().ok_or_else(bad)?;
    let (bucket, rest) = take_str(rest).ok_or_else(bad)?;
    let (key, rest) = take_str(rest).ok_or_else(bad)?;
    let object = ObjectRef::new(bucket, key).map_err(|_| bad())?;
    Ok((op, object, rest))
}

fn take_str(buf: &[u8]) -> Option<(String, &[u8])> {
    if buf.len() < 2 {
        return None;
    }
    let n = u16::from_le_bytes([buf[0], buf[1]]) as usize;
    let s = buf.get(2..2 + n)?;
    Some((String::from_utf8(s.to_vec()).ok()?, &buf[2 + n..]))
}

pub fn response_header(status: u8, payload_len: u64) -> [u8; 5] {
    let mut out = [0u8; 5];
    out[..4].copy_from_slice(&((payload_len + 1) as u32).to_le_bytes());
    out[4] = status;
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_layout() {
        let r = ObjectRef::new("bk", "key").unwrap();
        let mut req = request_header(OP_PUT, &r, 3);
        req.extend_from_slice(&[7, 8, 9]);
        assert_eq!(&req[..4], &(1 + 2 + 2 + 2 + 3 + 3u32).to_le_bytes());
        assert_eq!(req[4], OP_PUT);
        let (op, obj, payload) = parse_request(&req[4..]).unwrap();
        assert_eq!((op, obj, payload), (OP_PUT, r, &[7u8, 8, 9][..]));
    }

    #[test]
    fn truncated_request() {
        assert!(parse_request(&[OP_GET, 5, 0, b'a']).is_err());
        assert!(parse_request(&[]).is_err());
    }
}
