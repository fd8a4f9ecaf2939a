//! The ingress and load generator: promotes hints, replays traces in each
//! mode, injects faults, and reports latency breakdowns, slowdown, and
//! SLO-bounded density.

mod client;
mod faults;
mod gen;
mod replay;
mod report;
mod sweep;
mod testbed;

pub use client::{IngressClient, Outcome};
pub use faults::{armed, inject_faults, run_with_faults, FaultPlan, FaultRun, Kill};
pub use gen::{
    function_name, generate_trace, input_size, nominal_event, promote_hints, seed_inputs, trace_functions, GenParams,
};
pub use replay::{invoke_event, replay, unloaded_medians};
pub use report::{geometric_mean, median, percentile, FunctionStats, InvocationRecord, ReportCounters, RunReport};
pub use sweep::{density_sweep, SweepResult, SweepStep, SweepTemplate};
pub use testbed::{Testbed, TestbedConfig};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("schema: {0}")]
    Schema(String),
    #[error(transparent)]
    Proto(#[from] crate::proto::ProtoError),
    #[error(transparent)]
    Backend(#[from] crate::backend::BackendError),
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
