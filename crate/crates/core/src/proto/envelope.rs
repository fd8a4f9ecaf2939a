//! Ingress-side JSON schemas: invocation envelopes with promoted hints, and
//! the ingress response with its latency breakdown.

use std::fmt;

use base64::Engine;
use base64::engine::general_purpose::STANDARD as B64;
use serde::{Deserialize, Serialize};

use super::ProtoError;

pub const MAX_BUCKET_LEN: usize = 63;
pub const MAX_KEY_LEN: usize = 1024;
pub const MAX_EVENT_BODY: usize = 64 * 1024;

/// A (bucket, key) name of a remote object.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawRef", into = "RawRef")]
pub struct ObjectRef {
    bucket: String,
    key: String,
}

#[derive(Serialize, Deserialize)]
struct RawRef {
    bucket: String,
    key: String,
}

impl TryFrom<RawRef> for ObjectRef {
    type Error = ProtoError;
    fn try_from(raw: RawRef) -> Result<Self, ProtoError> {
        ObjectRef::new(raw.bucket, raw.key)
    }
}

impl From<ObjectRef> for RawRef {
    fn from(r: ObjectRef) -> Self {
        RawRef {
            bucket: r.bucket,
            key: r.key,
        }
    }
}

impl ObjectRef {
    pub fn new(bucket: impl Into<String>, key: impl Into<String>) -> Result<Self, ProtoError> {
        let bucket = bucket.into();
        let key = key.into();
        if bucket.is_empty() || bucket.len() > MAX_BUCKET_LEN || bucket.contains('\0') {
            return Err(ProtoError::Schema("bucket".into()));
        }
        if key.is_empty() || key.len() > MAX_KEY_LEN || key.contains('\0') {
            return Err(ProtoError::Schema("key".into()));
        }
        Ok(Self { bucket, key })
    }

    pub fn bucket(&self) -> &str {
        &self.bucket
    }

    pub fn key(&self) -> &str {
        &self.key
    }
}

impl fmt::Display for ObjectRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.bucket, self.key)
    }
}

macro_rules! id16 {
    ($name:ident) => {
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(pub [u8; 16]);

        impl $name {
            /// A fresh random, never all-zero value.
            pub fn random() -> Self {
                loop {
                    let v: [u8; 16] = rand::random();
                    if v != [0; 16] {
                        return Self(v);
                    }
                }
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn from_hex(s: &str) -> Result<Self, ProtoError> {
                let mut out = [0u8; 16];
                hex::decode_to_slice(s, &mut out)
                    .map_err(|_| ProtoError::Schema(stringify!($name).into()))?;
                Ok(Self(out))
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.to_hex())
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }
    };
}

id16!(InvocationId);
id16!(IdempotencyKey);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputHint {
    pub object: ObjectRef,
    pub size_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvocationEnvelope {
    pub invocation_id: InvocationId,
    pub idempotency_key: IdempotencyKey,
    pub function: String,
    pub input_hints: Vec<InputHint>,
    pub output_hints: Vec<ObjectRef>,
    pub event_body: Vec<u8>,
}

impl InvocationEnvelope {
    /// No hints means the payload is opaque to the platform and every GET
    /// goes through the streaming ring.
    pub fn is_opaque(&self) -> bool {
        self.input_hints.is_empty()
    }

    pub fn to_json(&self) -> Vec<u8> {
        let wire = WireEnvelope {
            invocation_id: Some(self.invocation_id.to_hex()),
            idempotency_key: Some(self.idempotency_key.to_hex()),
            function: Some(self.function.clone()),
            inputs: Some(
                self.input_hints
                    .iter()
                    .map(|h| WireInput {
                        bucket: h.object.bucket.clone(),
                        key: h.object.key.clone(),
                        size_bytes: h.size_bytes,
                    })
                    .collect(),
            ),
            outputs: Some(
                self.output_hints
                    .iter()
                    .map(|o| WireOutput {
                        bucket: o.bucket.clone(),
                        key: o.key.clone(),
                    })
                    .collect(),
            ),
            event_body_b64: Some(B64.encode(&self.event_body)),
        };
        serde_json::to_vec(&wire).expect("envelope serializes")
    }
}

// Every field optional so that validation can name the first offender.
#[derive(Serialize, Deserialize)]
struct WireEnvelope {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    invocation_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    idempotency_key: Option<String>,
    #[serde(default)]
    function: Option<String>,
    #[serde(default)]
    inputs: Option<Vec<WireInput>>,
    #[serde(default)]
    outputs: Option<Vec<WireOutput>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    event_body_b64: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct WireInput {
    bucket: String,
    key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    size_bytes: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct WireOutput {
    bucket: String,
    key: String,
}

/// Parses and validates the JSON body of an INGRESS_INVOKE frame.
///
/// Missing ids are minted here, since the ingress is the issuer of record for
/// invocation attempts.
pub fn parse_envelope(json: &[u8], max_object_bytes: u64) -> Result<InvocationEnvelope, ProtoError> {
    let value: serde_json::Value =
        serde_json::from_slice(json).map_err(|e| ProtoError::Schema(format!("json: {e}")))?;
    if !value.is_object() {
        return Err(ProtoError::Schema("envelope".into()));
    }
    let wire: WireEnvelope = serde_json::from_value(value).map_err(|e| ProtoError::Schema(first_field(&e)))?;

    let invocation_id = match wire.invocation_id.as_deref() {
        Some(s) => {
            let id = InvocationId::from_hex(s).map_err(|_| ProtoError::Schema("invocation_id".into()))?;
            if id.0 == [0; 16] {
                return Err(ProtoError::Schema("invocation_id".into()));
            }
            id
        }
        None => InvocationId::random(),
    };
    let idempotency_key = match wire.idempotency_key.as_deref() {
        Some(s) => IdempotencyKey::from_hex(s).map_err(|_| ProtoError::Schema("idempotency_key".into()))?,
        None => IdempotencyKey::random(),
    };
    let function = match wire.function {
        Some(f) if !f.is_empty() => f,
        _ => return Err(ProtoError::Schema("function".into())),
    };

    let mut input_hints = Vec::new();
    for (i, h) in wire.inputs.unwrap_or_default().into_iter().enumerate() {
        let object = ObjectRef::new(h.bucket, h.key).map_err(|e| match e {
            ProtoError::Schema(f) => ProtoError::Schema(format!("inputs[{i}].{f}")),
            other => other,
        })?;
        if let Some(size) = h.size_bytes {
            if size > max_object_bytes {
                return Err(ProtoError::HintTooLarge {
                    object: object.to_string(),
                    size,
                    max: max_object_bytes,
                });
            }
        }
        input_hints.push(InputHint {
            object,
            size_bytes: h.size_bytes,
        });
    }
    let mut output_hints = Vec::new();
    for (i, o) in wire.outputs.unwrap_or_default().into_iter().enumerate() {
        output_hints.push(ObjectRef::new(o.bucket, o.key).map_err(|e| match e {
            ProtoError::Schema(f) => ProtoError::Schema(format!("outputs[{i}].{f}")),
            other => other,
        })?);
    }
    let event_body = match wire.event_body_b64 {
        Some(s) => B64
            .decode(s.as_bytes())
            .map_err(|_| ProtoError::Schema("event_body_b64".into()))?,
        None => Vec::new(),
    };
    if event_body.len() > MAX_EVENT_BODY {
        return Err(ProtoError::Schema("event_body_b64".into()));
    }

    Ok(InvocationEnvelope {
        invocation_id,
        idempotency_key,
        function,
        input_hints,
        output_hints,
        event_body,
    })
}

fn first_field(e: &serde_json::Error) -> String {
    // serde_json reports "invalid type: ..., expected ... at line X column Y";
    // the field path is not available, so fall back to the message.
    let msg = e.to_string();
    for field in ["invocation_id", "idempotency_key", "function", "inputs", "outputs", "event_body_b64"] {
        if msg.contains(field) {
            return field.to_string();
        }
    }
    msg
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseStatus {
    Ok,
    Error,
}

/// Per-invocation latency breakdown in microseconds, measured on the
/// backend's monotonic clock.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Breakdown {
    pub queue: u64,
    pub restore: u64,
    pub prefetch: u64,
    pub exec: u64,
    pub writeback: u64,
    /// I/O wait while a sandbox was held: input wait past readiness plus
    /// time the handler spent blocked in object-store calls.
    #[serde(default)]
    pub io_wait: u64,
    /// Intersection of the restore and prefetch intervals.
    #[serde(default)]
    pub overlap: u64,
    /// Arrival at the backend to release of the response.
    #[serde(default)]
    pub total: u64,
}

/// Backend-clock timestamps (µs since backend start) for one attempt.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timeline {
    pub arrival: u64,
    pub provision_start: u64,
    pub ready: u64,
    pub invoke: u64,
    pub fn_response: u64,
    pub sandbox_released: u64,
    pub last_ack: u64,
    pub release: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngressResponse {
    pub invocation_id: String,
    pub status: ResponseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_b64: Option<String>,
    pub breakdown_us: Breakdown,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sandbox_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeline_us: Option<Timeline>,
}

impl IngressResponse {
    pub fn error(invocation_id: InvocationId, msg: impl Into<String>) -> Self {
        Self {
            invocation_id: invocation_id.to_hex(),
            status: ResponseStatus::Error,
            error: Some(msg.into()),
            payload_b64: None,
            breakdown_us: Breakdown::default(),
            sandbox_id: None,
            timeline_us: None,
        }
    }

    pub fn payload(&self) -> Option<Vec<u8>> {
        self.payload_b64.as_ref().and_then(|p| B64.decode(p).ok())
    }

    pub fn set_payload(&mut self, bytes: &[u8]) {
        self.payload_b64 = Some(B64.encode(bytes));
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("response serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, ProtoError> {
        serde_json::from_slice(bytes).map_err(|e| ProtoError::Schema(format!("response: {e}")))
    }
}
