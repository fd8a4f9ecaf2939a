//! Fault plans: kill the backend at named points while a trace replays.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{FaultInjector, FaultPoint};
use crate::proto::TraceEvent;

use super::report::RunReport;
use super::testbed::{Testbed, TestbedConfig};
use super::HarnessError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Kill {
    pub point: FaultPoint,
    pub count: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub kills: Vec<Kill>,
}

impl FaultPlan {
    pub fn kill(point: FaultPoint, count: u32) -> Self {
        FaultPlan {
            kills: vec![Kill { point, count }],
        }
    }
}

/// Arms every kill in the plan.
pub fn inject_faults(injector: &FaultInjector, plan: &FaultPlan) {
    for k in &plan.kills {
        injector.arm(k.point, k.count);
    }
}

#[derive(Debug, Clone)]
pub struct FaultRun {
    pub report: RunReport,
    pub restarts: u64,
    pub fired: Vec<FaultPoint>,
}

/// Replays `events` on a supervised backend with `plan` armed.
pub async fn run_with_faults(
    mut cfg: TestbedConfig,
    events: &[TraceEvent],
    plan: &FaultPlan,
    speedup: f64,
) -> Result<(FaultRun, Testbed), HarnessError> {
    let injector = cfg.faults.get_or_insert_with(FaultInjector::new).clone();
    let bed = Testbed::start(cfg)?;
    bed.seed(events);
    inject_faults(&injector, plan);
    let report = bed.replay(events, speedup).await;
    let run = FaultRun {
        report,
        restarts: bed.restarts(),
        fired: injector.fired(),
    };
    Ok((run, bed))
}

/// A fresh injector with `plan` armed.
pub fn armed(plan: &FaultPlan) -> Arc<FaultInjector> {
    let f = FaultInjector::new();
    inject_faults(&f, plan);
    f
}
