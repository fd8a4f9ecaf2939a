//! Trace replay against a running backend.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use crate::proto::TraceEvent;
use crate::sandbox::Mode;

use super::client::{IngressClient, Outcome};
use super::gen::promote_hints;
use super::report::{median, InvocationRecord, RunReport};

fn record(index: usize, ev: &TraceEvent, out: Result<Outcome, super::HarnessError>) -> InvocationRecord {
    let mut rec = InvocationRecord {
        index,
        function: ev.function.clone(),
        t_ms: ev.t_ms,
        hinted: ev.hinted,
        ok: false,
        error: None,
        latency_us: 0,
        attempts: 0,
        breakdown_us: Default::default(),
        sandbox_id: None,
        timeline_us: None,
        payload: None,
    };
    match out {
        Ok(o) => {
            let r = o.response;
            rec.ok = r.status == crate::proto::ResponseStatus::Ok;
            rec.error = r.error.clone();
            rec.latency_us = o.latency.as_micros() as u64;
            rec.attempts = o.attempts;
            rec.breakdown_us = r.breakdown_us;
            rec.sandbox_id = r.sandbox_id;
            rec.timeline_us = r.timeline_us;
            rec.payload = r.payload().and_then(|p| serde_json::from_slice(&p).ok());
        }
        Err(e) => rec.error = Some(format!("no response: {e}")),
    }
    rec
}

/// Invokes one event and waits for its outcome.
pub async fn invoke_event(client: &IngressClient, index: usize, ev: &TraceEvent) -> InvocationRecord {
    let out = match promote_hints(&ev.to_json()) {
        Ok(env) => client.invoke(env).await,
        Err(e) => Err(e.into()),
    };
    record(index, ev, out)
}

/// Issues every event at its offset (divided by `speedup`) without
/// waiting for earlier ones, and collects one record per event.
pub async fn replay(client: &IngressClient, events: &[TraceEvent], mode: Mode, speedup: f64) -> RunReport {
    let start = Instant::now();
    let speedup = if speedup > 0.0 { speedup } else { 1.0 };
    let mut tasks = tokio::task::JoinSet::new();
    for (i, ev) in events.iter().enumerate() {
        let at = Duration::from_secs_f64(ev.t_ms as f64 / 1000.0 / speedup);
        tokio::time::sleep_until((start + at).into()).await;
        let client = client.clone();
        let ev = ev.clone();
        tasks.spawn(async move { invoke_event(&client, i, &ev).await });
    }
    let records = tasks.join_all().await;
    let mut report = RunReport::new(mode, records);
    if let Ok(m) = client.status().await {
        report.counters.backend = m;
    }
    report
}

/// Warm single-invocation latency of each event's function: `samples`
/// sequential invocations, the first (cold) response discarded.
pub async fn unloaded_medians(client: &IngressClient, events: &[TraceEvent], samples: usize) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for (i, ev) in events.iter().enumerate() {
        let mut lat = Vec::new();
        for s in 0..samples.max(2) {
            let rec = invoke_event(client, i, ev).await;
            if s > 0 && rec.ok {
                lat.push(rec.latency_us);
            }
        }
        if !lat.is_empty() {
            out.insert(ev.function.clone(), median(&lat));
        }
    }
    out
}
