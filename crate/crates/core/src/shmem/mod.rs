//! Zero-copy data plane: per-sandbox file-backed regions, the backend's slot
//! allocator, and the SPSC ring used for streaming.

mod checksum;
mod region;
mod ring;

pub use checksum::{Fnv1a64, fnv1a64};
pub use region::*;
pub use ring::{RING_CTRL_BYTES, Ring};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ShmemError {
    #[error("region of {requested} bytes exceeds the per-sandbox cap of {cap}")]
    CapacityExceeded { requested: u64, cap: u64 },
    #[error("region full: {requested} bytes requested, {remaining} remaining")]
    RegionFull { requested: u64, remaining: u64 },
    #[error("window [{offset}, +{len}) is outside the slot area")]
    OutOfBounds { offset: u64, len: u64 },
    #[error("bad region layout: {0}")]
    BadLayout(&'static str),
    #[error("attach failed: {0}")]
    Attach(String),
    #[error("region file: {0}")]
    Filesystem(#[from] std::io::Error),
}
