//! Run reports: per-invocation breakdowns, per-function percentiles, and
//! counters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backend::MetricsSnapshot;
use crate::frontend::CopyCounters;
use crate::proto::{Breakdown, ResponseStatus, Timeline};
use crate::sandbox::Mode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationRecord {
    pub index: usize,
    pub function: String,
    pub t_ms: u64,
    pub hinted: bool,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Caller-observed latency across all attempts.
    pub latency_us: u64,
    pub attempts: u32,
    pub breakdown_us: Breakdown,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sandbox_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeline_us: Option<Timeline>,
    /// The handler's JSON payload, when it succeeded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<serde_json::Value>,
}

impl InvocationRecord {
    pub fn status(&self) -> ResponseStatus {
        if self.ok {
            ResponseStatus::Ok
        } else {
            ResponseStatus::Error
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionStats {
    pub function: String,
    pub count: usize,
    pub p50_us: u64,
    pub p99_us: u64,
    /// p99 over the unloaded median, when one was measured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slowdown: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportCounters {
    /// Frontend counters summed over every offloaded invocation.
    pub frontend: CopyCounters,
    /// Backend counters as of the end of the run.
    pub backend: MetricsSnapshot,
    /// Requests seen by the store, when the harness can see its log.
    pub store_gets: u64,
    pub store_puts: u64,
    /// Ingress retries (attempts beyond the first).
    pub retries: u64,
    /// Objects written more than once.
    pub duplicate_versions: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub invocations: Vec<InvocationRecord>,
    pub functions: Vec<FunctionStats>,
    pub counters: ReportCounters,
    pub errors: usize,
    /// Mean I/O wait while a sandbox was held.
    pub mean_io_wait_us: f64,
    pub mean_latency_us: f64,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn median(values: &[u64]) -> u64 {
    let mut v = values.to_vec();
    v.sort_unstable();
    percentile(&v, 50.0)
}

pub fn geometric_mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    (xs.iter().map(|x| x.ln()).sum::<f64>() / xs.len() as f64).exp()
}

fn mean(xs: impl Iterator<Item = u64>) -> f64 {
    let (s, n) = xs.fold((0u128, 0usize), |(s, n), x| (s + x as u128, n + 1));
    if n == 0 {
        0.0
    } else {
        s as f64 / n as f64
    }
}

impl RunReport {
    pub fn new(mode: Mode, mut invocations: Vec<InvocationRecord>) -> RunReport {
        invocations.sort_by_key(|r| r.index);
        let mut by_fn: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
        for r in &invocations {
            by_fn.entry(&r.function).or_default().push(r.latency_us);
        }
        let functions = by_fn
            .into_iter()
            .map(|(f, mut v)| {
                v.sort_unstable();
                FunctionStats {
                    function: f.to_string(),
                    count: v.len(),
                    p50_us: percentile(&v, 50.0),
                    p99_us: percentile(&v, 99.0),
                    slowdown: None,
                }
            })
            .collect();
        let mut frontend = CopyCounters::default();
        for r in &invocations {
            if let Some(c) = r
                .payload
                .as_ref()
                .and_then(|p| p.get("frontend"))
                .and_then(|f| serde_json::from_value::<CopyCounters>(f.clone()).ok())
            {
                frontend.add(&c);
            }
        }
        let ok = || invocations.iter().filter(|r| r.ok);
        RunReport {
            mode,
            errors: invocations.iter().filter(|r| !r.ok).count(),
            mean_io_wait_us: mean(ok().map(|r| r.breakdown_us.io_wait)),
            mean_latency_us: mean(ok().map(|r| r.latency_us)),
            counters: ReportCounters {
                frontend,
                retries: invocations.iter().map(|r| r.attempts.saturating_sub(1) as u64).sum(),
                ..Default::default()
            },
            functions,
            invocations,
        }
    }

    /// Fills in slowdowns against per-function unloaded medians.
    pub fn apply_unloaded(&mut self, unloaded_median_us: &BTreeMap<String, u64>) {
        for f in &mut self.functions {
            if let Some(&m) = unloaded_median_us.get(&f.function) {
                f.slowdown = Some(f.p99_us as f64 / m.max(1) as f64);
            }
        }
    }

    /// Geometric mean of the per-function slowdowns that are known.
    pub fn geomean_slowdown(&self) -> Option<f64> {
        let xs: Vec<f64> = self.functions.iter().filter_map(|f| f.slowdown).collect();
        (!xs.is_empty()).then(|| geometric_mean(&xs))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per invocation, for plotting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "index,function,t_ms,mode,hinted,ok,attempts,latency_us,queue_us,restore_us,prefetch_us,exec_us,writeback_us,io_wait_us,overlap_us,total_us\n",
        );
        for r in &self.invocations {
            let b = &r.breakdown_us;
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.index,
                r.function,
                r.t_ms,
                self.mode,
                r.hinted,
                r.ok,
                r.attempts,
                r.latency_us,
                b.queue,
                b.restore,
                b.prefetch,
                b.exec,
                b.writeback,
                b.io_wait,
                b.overlap,
                b.total
            ));
        }
        s
    }
}
