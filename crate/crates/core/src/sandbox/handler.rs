use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::backend::TokenBucket;
use crate::frontend::{ClientSession, CopyCounters, DirectClient, ObjectClient, SdkError, SessionClient};
use crate::proto::{ObjectRef, Status, TraceEvent};
use crate::shmem::fnv1a64;

use super::{Mode, SandboxError, SandboxParams};

/// Deterministic content for a synthetic object, so any reader can check
/// bytes without a copy of the original.
pub fn synthetic_bytes(object: &ObjectRef, size: u64) -> Vec<u8> {
    let mut state = fnv1a64(object.to_string().as_bytes());
    let mut out = Vec::with_capacity(size as usize);
    while (out.len() as u64) < size {
        // splitmix64
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        let take = ((size as usize) - out.len()).min(8);
        out.extend_from_slice(&z.to_le_bytes()[..take]);
    }
    out
}

/// Burns CPU for `d`, yielding regularly so other work on the core runs.
pub fn spin_for(d: Duration) {
    let t0 = Instant::now();
    while t0.elapsed() < d {
        for _ in 0..512 {
            std::hint::spin_loop();
        }
        std::thread::yield_now();
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub object: String,
    pub len: u64,
    /// FNV-1a-64, 16 hex digits.
    pub fnv: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputDigest {
    pub object: String,
    pub len: u64,
    pub version: Option<u64>,
}

/// What the synthetic handler returns to the caller.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandlerPayload {
    pub inputs: Vec<InputDigest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputDigest>,
    /// Frontend copy counters for this invocation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frontend: Option<CopyCounters>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandlerReport {
    pub payload: HandlerPayload,
    pub fetch_us: u64,
    pub compute_us: u64,
    pub write_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{message}")]
pub struct HandlerError {
    pub status: Status,
    pub message: String,
    pub fetch_us: u64,
    pub compute_us: u64,
    pub write_us: u64,
}

impl HandlerError {
    fn new(status: Status, message: impl Into<String>) -> Self {
        HandlerError {
            status,
            message: message.into(),
            fetch_us: 0,
            compute_us: 0,
            write_us: 0,
        }
    }

    fn sdk(e: SdkError) -> Self {
        HandlerError::new(e.status(), e.to_string())
    }
}

/// The benchmark function: read every input, compute for `compute_us`,
/// write the output, and report digests of what it saw.
pub fn synthetic_handler<C: ObjectClient + ?Sized>(client: &mut C, event: &TraceEvent) -> Result<HandlerReport, HandlerError> {
    let mut fetch = Duration::ZERO;
    let mut write = Duration::ZERO;
    let mut inputs = Vec::with_capacity(event.inputs.len());
    let timed = |mut e: HandlerError, f: Duration, c: Duration, w: Duration| {
        e.fetch_us = f.as_micros() as u64;
        e.compute_us = c.as_micros() as u64;
        e.write_us = w.as_micros() as u64;
        e
    };
    for input in &event.inputs {
        let t = Instant::now();
        let mut body = match client.get_object(input.object.bucket(), input.object.key()) {
            Ok(b) => b,
            Err(e) => return Err(timed(HandlerError::sdk(e), fetch + t.elapsed(), Duration::ZERO, write)),
        };
        let len = body.len();
        let fetched = t.elapsed();
        // Draining a stream is I/O; digesting bytes already in memory is not.
        let streamed = body.as_slice().is_none();
        let fnv = body
            .checksum()
            .map_err(|e| timed(HandlerError::new(Status::StoreFailed, e.to_string()), fetch, Duration::ZERO, write))?;
        fetch += if streamed { t.elapsed() } else { fetched };
        inputs.push(InputDigest {
            object: input.object.to_string(),
            len,
            fnv: format!("{fnv:016x}"),
        });
    }

    let compute_start = Instant::now();
    if event.fail {
        return Err(timed(HandlerError::new(Status::HandlerError, "handler failed"), fetch, Duration::ZERO, write));
    }
    let out_data = event.output.as_ref().map(|o| synthetic_bytes(&o.object, o.size));
    spin_for(Duration::from_micros(event.compute_us).saturating_sub(compute_start.elapsed()));
    let compute = compute_start.elapsed();

    let mut output = None;
    if let (Some(o), Some(data)) = (&event.output, out_data) {
        let t = Instant::now();
        let r = client.put_object(o.object.bucket(), o.object.key(), &data);
        write += t.elapsed();
        let r = r.map_err(|e| timed(HandlerError::sdk(e), fetch, compute, write))?;
        output = Some(OutputDigest {
            object: o.object.to_string(),
            len: o.size,
            version: r.version_id,
        });
    }
    Ok(HandlerReport {
        payload: HandlerPayload {
            inputs,
            output,
            frontend: None,
        },
        fetch_us: fetch.as_micros() as u64,
        compute_us: compute.as_micros() as u64,
        write_us: write.as_micros() as u64,
    })
}

/// Main loop of a sandbox: attach, then serve invocations until the
/// backend closes the channel.
pub fn run_sandbox(params: &SandboxParams) -> Result<(), SandboxError> {
    let mut session = ClientSession::attach(&params.control, params.region.as_deref(), params.sandbox_id)?;
    let mut direct = match params.mode {
        Mode::Coupled => {
            let store = params
                .store
                .ok_or_else(|| SandboxError::Spawn("coupled sandbox needs a store address".into()))?;
            let limiter = (params.rate_limit_bps > 0).then(|| Arc::new(TokenBucket::new(params.rate_limit_bps)));
            Some(DirectClient::new(store, limiter))
        }
        _ => None,
    };
    while let Some(inv) = session.next_invocation()? {
        let before = session.counters();
        let result = match TraceEvent::from_json(&inv.event_body) {
            Err(e) => Err(HandlerError::new(Status::HandlerError, format!("bad event: {e}"))),
            Ok(event) => match direct.as_mut() {
                Some(d) => synthetic_handler(d, &event),
                None => {
                    let mut c = SessionClient::new(&mut session, inv.delegate_writes());
                    synthetic_handler(&mut c, &event)
                }
            },
        };
        match result {
            Ok(mut rep) => {
                if direct.is_none() {
                    rep.payload.frontend = Some(session.counters().since(&before));
                }
                let body = serde_json::to_vec(&rep.payload).expect("payload serializes");
                session.respond(Status::Ok, &body, rep.fetch_us, rep.compute_us, rep.write_us)?;
            }
            Err(e) => {
                session.respond(e.status, e.message.as_bytes(), e.fetch_us, e.compute_us, e.write_us)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::Body;
    use crate::proto::SizedRef;
    use std::collections::HashMap;

    #[derive(Default)]
    struct MemClient {
        objects: HashMap<(String, String), Vec<u8>>,
        versions: HashMap<(String, String), u64>,
    }

    impl ObjectClient for MemClient {
        fn get_object(&mut self, bucket: &str, key: &str) -> Result<Body, SdkError> {
            self.objects
                .get(&(bucket.into(), key.into()))
                .map(|d| Body::owned(d.clone()))
                .ok_or(SdkError::NoSuchKey {
                    bucket: bucket.into(),
                    key: key.into(),
                })
        }
        fn put_object(&mut self, bucket: &str, key: &str, body: &[u8]) -> Result<crate::frontend::PutObjectOutput, SdkError> {
            let k = (bucket.to_string(), key.to_string());
            self.objects.insert(k.clone(), body.to_vec());
            let v = self.versions.entry(k).or_insert(0);
            *v += 1;
            Ok(crate::frontend::PutObjectOutput { version_id: Some(*v) })
        }
    }

    fn obj(k: &str) -> ObjectRef {
        ObjectRef::new("b", k).unwrap()
    }

    fn event(inputs: Vec<SizedRef>, compute_us: u64, output: Option<SizedRef>) -> TraceEvent {
        TraceEvent {
            t_ms: 0,
            function: "f".into(),
            inputs,
            compute_us,
            output,
            hinted: true,
            fail: false,
        }
    }

    #[test]
    fn synthetic_bytes_are_deterministic() {
        assert_eq!(synthetic_bytes(&obj("a"), 100), synthetic_bytes(&obj("a"), 100));
        assert_ne!(synthetic_bytes(&obj("a"), 100), synthetic_bytes(&obj("b"), 100));
        assert_eq!(synthetic_bytes(&obj("a"), 13).len(), 13);
        assert_eq!(&synthetic_bytes(&obj("a"), 100)[..13], &synthetic_bytes(&obj("a"), 13)[..]);
    }

    #[test]
    fn pass_through_echoes_input_checksum() {
        let data = vec![5u8; 1024];
        let mut c = MemClient::default();
        c.objects.insert(("b".into(), "in".into()), data.clone());
        let ev = event(
            vec![SizedRef {
                object: obj("in"),
                size: 1024,
            }],
            0,
            None,
        );
        let rep = synthetic_handler(&mut c, &ev).unwrap();
        assert_eq!(rep.payload.inputs.len(), 1);
        assert_eq!(rep.payload.inputs[0].len, 1024);
        assert_eq!(rep.payload.inputs[0].fnv, format!("{:016x}", fnv1a64(&data)));
        assert!(rep.payload.output.is_none());
    }

    #[test]
    fn output_is_written_with_version() {
        let mut c = MemClient::default();
        let ev = event(
            vec![],
            2_000,
            Some(SizedRef {
                object: obj("out"),
                size: 77,
            }),
        );
        let t0 = Instant::now();
        let rep = synthetic_handler(&mut c, &ev).unwrap();
        assert!(t0.elapsed() >= Duration::from_micros(2_000));
        assert!(rep.compute_us >= 2_000);
        assert_eq!(rep.payload.output.unwrap().version, Some(1));
        assert_eq!(c.objects[&("b".to_string(), "out".to_string())], synthetic_bytes(&obj("out"), 77));
    }

    #[test]
    fn missing_input_and_fail_flag_are_errors() {
        let mut c = MemClient::default();
        let ev = event(
            vec![SizedRef {
                object: obj("none"),
                size: 1,
            }],
            0,
            None,
        );
        assert_eq!(synthetic_handler(&mut c, &ev).unwrap_err().status, Status::NotFound);
        let mut ev = event(vec![], 0, None);
        ev.fail = true;
        assert_eq!(synthetic_handler(&mut c, &ev).unwrap_err().status, Status::HandlerError);
    }
}
