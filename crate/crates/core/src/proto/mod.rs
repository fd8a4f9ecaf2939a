//! Control-plane wire protocol and the JSON schemas shared across the
//! backend, frontends, and harness.

mod envelope;
mod frame;
mod messages;
mod trace;

pub use envelope::*;
pub use frame::*;
pub use messages::*;
pub use trace::*;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProtoError {
    #[error("frame length {0} exceeds the 16 MiB control-frame cap")]
    OversizeFrame(u64),
    #[error("stream ended inside a frame")]
    TruncatedFrame,
    #[error("frame length field is zero")]
    EmptyFrame,
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("message type 0x{0:02x} is not valid on this channel")]
    WrongScope(u8),
    #[error("malformed {0} body")]
    Malformed(&'static str),
    #[error("schema error at field `{0}`")]
    Schema(String),
    #[error("hint for {object} declares {size} bytes, above the {max}-byte maximum")]
    HintTooLarge { object: String, size: u64, max: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
