//! Decoupled serverless I/O.
//!
//! A shared host backend terminates invocations, prefetches hinted inputs
//! while sandboxes restore, serves object-storage GET/PUT calls remoted from
//! a thin in-sandbox frontend over file-backed shared memory, and writes
//! outputs back asynchronously while holding the caller's response until the
//! store acknowledges. A coupled mode, where each sandbox talks to storage
//! itself, serves as the baseline; the harness replays traces against both.

pub mod backend;
pub mod frontend;
pub mod harness;
pub mod proto;
pub mod sandbox;
pub mod shmem;
pub mod store;
