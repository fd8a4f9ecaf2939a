//! Trace events. One JSON object per line in a trace file; the same object is
//! the event body delivered to the synthetic handler.

use serde::{Deserialize, Serialize};

use super::envelope::ObjectRef;
use super::ProtoError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizedRef {
    #[serde(flatten)]
    pub object: ObjectRef,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t_ms: u64,
    pub function: String,
    #[serde(default)]
    pub inputs: Vec<SizedRef>,
    #[serde(default)]
    pub compute_us: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<SizedRef>,
    #[serde(default = "yes")]
    pub hinted: bool,
    /// Makes the synthetic handler fail after its I/O.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fail: bool,
}

fn yes() -> bool {
    true
}

impl TraceEvent {
    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("trace event serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, ProtoError> {
        serde_json::from_slice(bytes).map_err(|e| ProtoError::Schema(format!("trace event: {e}")))
    }
}

/// Parses a JSON-lines trace, checking that events are sorted by `t_ms`.
pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>, ProtoError> {
    let mut out: Vec<TraceEvent> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let ev = TraceEvent::from_json(line.as_bytes())
            .map_err(|e| ProtoError::Schema(format!("line {}: {e}", lineno + 1)))?;
        if let Some(prev) = out.last() {
            if ev.t_ms < prev.t_ms {
                return Err(ProtoError::Schema(format!("line {}: t_ms not sorted", lineno + 1)));
            }
        }
        out.push(ev);
    }
    Ok(out)
}

pub fn write_trace(events: &[TraceEvent]) -> String {
    let mut s = String::new();
    for e in events {
        s.push_str(&String::from_utf8(e.to_json()).unwrap());
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_format() {
        let text = r#"{"t_ms":0,"function":"f","inputs":[{"bucket":"b","key":"k","size":10}],"compute_us":5}
{"t_ms":3,"function":"g","output":{"bucket":"b","key":"o","size":1},"hinted":false}
"#;
        let evs = parse_trace(text).unwrap();
        assert_eq!(evs.len(), 2);
        assert!(evs[0].hinted);
        assert_eq!(evs[0].inputs[0].size, 10);
        assert!(!evs[1].hinted);
        assert_eq!(parse_trace(&write_trace(&evs)).unwrap(), evs);
    }

    #[test]
    fn unsorted_rejected() {
        let text = "{\"t_ms\":5,\"function\":\"f\"}\n{\"t_ms\":4,\"function\":\"f\"}\n";
        assert!(parse_trace(text).is_err());
    }
}
