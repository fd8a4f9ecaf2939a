//! Synthetic traces and hint promotion.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::proto::{IdempotencyKey, InputHint, InvocationEnvelope, InvocationId, ObjectRef, ProtoError, SizedRef, TraceEvent};
use crate::sandbox::synthetic_bytes;
use crate::store::StoreState;

/// Shape of a generated trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenParams {
    pub seed: u64,
    pub functions: usize,
    /// Mean arrivals per second across all functions (Poisson).
    pub rate_per_s: f64,
    pub events: usize,
    /// Share of an event's nominal service time spent moving bytes.
    pub io_ratio: f64,
    /// Nominal service time per event.
    pub service_us: u64,
    /// Storage throughput used to turn I/O time into bytes.
    pub nominal_bps: u64,
    /// Share of events whose inputs are promoted to hints.
    pub hinted_fraction: f64,
    /// Distinct input objects per function.
    pub inputs_per_function: usize,
    pub bucket: String,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            seed: 1,
            functions: 4,
            rate_per_s: 20.0,
            events: 100,
            io_ratio: 0.5,
            service_us: 20_000,
            nominal_bps: 600_000_000,
            hinted_fraction: 0.96,
            inputs_per_function: 4,
            bucket: "bench".into(),
        }
    }
}

pub fn function_name(i: usize) -> String {
    format!("fn{i:03}")
}

/// Seeded generator: Poisson arrivals, functions drawn uniformly, input
/// and output sizes set by `io_ratio` with ±50% jitter, 60/40 between
/// input and output bytes.
pub fn generate_trace(p: &GenParams) -> Vec<TraceEvent> {
    assert!(p.functions > 0 && p.inputs_per_function > 0, "need at least one function and input");
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let gap = Exp::new(p.rate_per_s.max(1e-9)).expect("positive rate");
    let io_bytes = io_bytes(p);
    let compute_us = p.service_us - (p.service_us as f64 * p.io_ratio.clamp(0.0, 1.0)).round() as u64;

    let mut sizes = BTreeMap::new();
    for f in 0..p.functions {
        for k in 0..p.inputs_per_function {
            sizes.insert((f, k), input_size(p, f, k));
        }
    }

    let mut t = 0.0f64;
    let mut out = Vec::with_capacity(p.events);
    for i in 0..p.events {
        t += gap.sample(&mut rng) * 1000.0;
        let f = rng.random_range(0..p.functions);
        let k = rng.random_range(0..p.inputs_per_function);
        let name = function_name(f);
        let input = ObjectRef::new(p.bucket.clone(), format!("in/{name}/{k}")).expect("valid ref");
        let jitter: f64 = rng.random_range(0.5..1.5);
        let out_size = (io_bytes * 0.4 * jitter) as u64;
        let output = (out_size > 0).then(|| SizedRef {
            object: ObjectRef::new(p.bucket.clone(), format!("out/{name}/{i}")).expect("valid ref"),
            size: out_size,
        });
        out.push(TraceEvent {
            t_ms: t as u64,
            function: name,
            inputs: vec![SizedRef {
                object: input,
                size: sizes[&(f, k)],
            }],
            compute_us,
            output,
            hinted: rng.random_bool(p.hinted_fraction.clamp(0.0, 1.0)),
            fail: false,
        });
    }
    out
}

fn io_bytes(p: &GenParams) -> f64 {
    p.service_us as f64 * p.io_ratio.clamp(0.0, 1.0) * p.nominal_bps as f64 / 8e6
}

/// Size of input `k` of function `f`. Depends only on the seed and the
/// indices, so traces with different function counts agree on it.
pub fn input_size(p: &GenParams, f: usize, k: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ ((f as u64) << 32 | k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let jitter: f64 = rng.random_range(0.5..1.5);
    ((io_bytes(p) * 0.6 * jitter) as u64).max(1)
}

/// A nominal event of function `f` outside any trace, used to measure its
/// unloaded latency.
pub fn nominal_event(p: &GenParams, f: usize, tag: &str) -> TraceEvent {
    let name = function_name(f);
    let out_size = (io_bytes(p) * 0.4) as u64;
    TraceEvent {
        t_ms: 0,
        function: name.clone(),
        inputs: vec![SizedRef {
            object: ObjectRef::new(p.bucket.clone(), format!("in/{name}/0")).expect("valid ref"),
            size: input_size(p, f, 0),
        }],
        compute_us: p.service_us - (p.service_us as f64 * p.io_ratio.clamp(0.0, 1.0)).round() as u64,
        output: (out_size > 0).then(|| SizedRef {
            object: ObjectRef::new(p.bucket.clone(), format!("out/{name}/{tag}")).expect("valid ref"),
            size: out_size,
        }),
        hinted: true,
        fail: false,
    }
}

/// Distinct functions named by a trace, sorted.
pub fn trace_functions(events: &[TraceEvent]) -> Vec<String> {
    let mut v: Vec<String> = events.iter().map(|e| e.function.clone()).collect();
    v.sort();
    v.dedup();
    v
}

/// Puts every input a trace references into the store.
pub fn seed_inputs(store: &StoreState, events: &[TraceEvent]) {
    let mut seen = std::collections::HashSet::new();
    for e in events {
        for i in &e.inputs {
            if seen.insert(i.object.clone()) {
                store.seed(i.object.clone(), synthetic_bytes(&i.object, i.size));
            }
        }
    }
}

/// Builds the envelope the ingress sends for an event body: inputs and
/// their sizes become hints when the event is hinted, and are withheld
/// otherwise.
pub fn promote_hints(event_body: &[u8]) -> Result<InvocationEnvelope, ProtoError> {
    let ev = TraceEvent::from_json(event_body)?;
    let (input_hints, output_hints) = if ev.hinted {
        (
            ev.inputs
                .iter()
                .map(|i| InputHint {
                    object: i.object.clone(),
                    size_bytes: Some(i.size),
                })
                .collect(),
            ev.output.iter().map(|o| o.object.clone()).collect(),
        )
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(InvocationEnvelope {
        invocation_id: InvocationId::random(),
        idempotency_key: IdempotencyKey::random(),
        function: ev.function,
        input_hints,
        output_hints,
        event_body: event_body.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hinted_event_promotes_its_inputs() {
        let mut ev = generate_trace(&GenParams {
            events: 1,
            hinted_fraction: 1.0,
            ..Default::default()
        })
        .remove(0);
        let env = promote_hints(&ev.to_json()).unwrap();
        assert_eq!(env.input_hints.len(), 1);
        assert_eq!(env.input_hints[0].size_bytes, Some(ev.inputs[0].size));
        assert_eq!(env.function, ev.function);
        ev.hinted = false;
        let env = promote_hints(&ev.to_json()).unwrap();
        assert!(env.input_hints.is_empty() && env.output_hints.is_empty());
        assert!(env.is_opaque());
    }

    #[test]
    fn bad_body_is_a_schema_error() {
        assert!(matches!(promote_hints(b"{\"nope\":1}"), Err(ProtoError::Schema(_))));
    }

    #[test]
    fn seeded_and_sorted() {
        let p = GenParams {
            events: 500,
            ..Default::default()
        };
        let a = generate_trace(&p);
        assert_eq!(a, generate_trace(&p));
        assert!(a.windows(2).all(|w| w[0].t_ms <= w[1].t_ms));
        assert_ne!(a, generate_trace(&GenParams { seed: 2, ..p }));
    }

    #[test]
    fn io_ratio_sets_the_split() {
        let p = GenParams {
            io_ratio: 0.9,
            service_us: 10_000,
            ..Default::default()
        };
        let ev = &generate_trace(&p)[0];
        assert_eq!(ev.compute_us, 1000);
        // 9 ms at 600 Mbps is 675 kB; the input carries 60% of it, ±50%.
        let s = ev.inputs[0].size as f64;
        assert!((0.5 * 405_000.0..=1.5 * 405_000.0).contains(&s), "{s}");
        let none = generate_trace(&GenParams { io_ratio: 0.0, ..p });
        assert!(none.iter().all(|e| e.output.is_none() && e.inputs[0].size == 1));
    }

    #[test]
    fn fallback_share_tracks_the_hinted_fraction() {
        let p = GenParams {
            events: 20_000,
            ..Default::default()
        };
        let unhinted = generate_trace(&p).iter().filter(|e| !e.hinted).count() as f64 / 20_000.0;
        assert!((unhinted - 0.04).abs() < 0.005, "{unhinted}");
    }
}
