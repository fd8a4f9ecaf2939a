//! Randomized properties of the codec, envelopes, traces, rings and regions.

use std::collections::VecDeque;

use nexus::proto::*;
use nexus::shmem::*;
use proptest::prelude::*;

fn message_type() -> impl Strategy<Value = MessageType> {
    proptest::sample::select(MessageType::ALL.to_vec())
}

fn object_ref() -> impl Strategy<Value = ObjectRef> {
    ("[a-z0-9.-]{1,63}", "[ -~]{1,200}").prop_map(|(b, k)| ObjectRef::new(b, k).unwrap())
}

fn envelope() -> impl Strategy<Value = InvocationEnvelope> {
    (
        any::<[u8; 16]>().prop_filter("non-zero id", |b| *b != [0; 16]),
        any::<[u8; 16]>(),
        "[a-zA-Z0-9_-]{1,32}",
        proptest::collection::vec((object_ref(), proptest::option::of(0u64..1 << 30)), 0..6),
        proptest::collection::vec(object_ref(), 0..3),
        proptest::collection::vec(any::<u8>(), 0..512),
    )
        .prop_map(|(id, key, function, inputs, outputs, body)| InvocationEnvelope {
            invocation_id: InvocationId(id),
            idempotency_key: IdempotencyKey(key),
            function,
            input_hints: inputs
                .into_iter()
                .map(|(object, size_bytes)| InputHint { object, size_bytes })
                .collect(),
            output_hints: outputs,
            event_body: body,
        })
}

fn trace_event() -> impl Strategy<Value = TraceEvent> {
    (
        0u64..1_000_000,
        "fn[0-9]{3}",
        proptest::collection::vec((object_ref(), any::<u32>()), 0..4),
        any::<u32>(),
        proptest::option::of((object_ref(), any::<u32>())),
        any::<bool>(),
        any::<bool>(),
    )
        .prop_map(|(t_ms, function, inputs, compute, output, hinted, fail)| TraceEvent {
            t_ms,
            function,
            inputs: inputs.into_iter().map(|(object, s)| SizedRef { object, size: s as u64 }).collect(),
            compute_us: compute as u64,
            output: output.map(|(object, s)| SizedRef { object, size: s as u64 }),
            hinted,
            fail,
        })
}

proptest! {
    #[test]
    fn frames_round_trip(frames in proptest::collection::vec((message_type(), proptest::collection::vec(any::<u8>(), 0..2048)), 1..20)) {
        let mut stream = Vec::new();
        for (t, body) in &frames {
            let bytes = encode_frame(*t, body).unwrap();
            prop_assert_eq!(bytes.len(), 5 + body.len());
            let (f, used) = decode_frame(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(f.kind().unwrap(), *t);
            prop_assert_eq!(&f.body, body);
            stream.extend_from_slice(&bytes);
        }
        let mut cur = std::io::Cursor::new(stream);
        for (t, body) in &frames {
            let f = read_frame(&mut cur).unwrap().unwrap();
            prop_assert_eq!(f.kind().unwrap(), *t);
            prop_assert_eq!(&f.body, body);
        }
        prop_assert!(read_frame(&mut cur).unwrap().is_none());
    }

    #[test]
    fn truncated_frames_are_rejected(t in message_type(), body in proptest::collection::vec(any::<u8>(), 0..256), cut in 0usize..1000) {
        let bytes = encode_frame(t, &body).unwrap();
        let cut = cut % bytes.len();
        prop_assert!(matches!(decode_frame(&bytes[..cut]), Err(ProtoError::TruncatedFrame)));
        let mut cur = std::io::Cursor::new(&bytes[..cut]);
        let r = read_frame(&mut cur);
        if cut == 0 {
            prop_assert!(r.unwrap().is_none());
        } else {
            prop_assert!(matches!(r, Err(ProtoError::TruncatedFrame)));
        }
    }

    #[test]
    fn envelopes_round_trip(env in envelope()) {
        let back = parse_envelope(&env.to_json(), u64::MAX).unwrap();
        prop_assert_eq!(back, env);
    }

    #[test]
    fn trace_events_round_trip(mut evs in proptest::collection::vec(trace_event(), 0..20)) {
        evs.sort_by_key(|e| e.t_ms);
        prop_assert_eq!(parse_trace(&write_trace(&evs)).unwrap(), evs);
    }

    #[test]
    fn ring_is_a_fifo(cap_log in 3u32..10, ops in proptest::collection::vec((any::<bool>(), 0usize..700), 1..300)) {
        let ring = Ring::heap(1 << cap_log);
        let mut model = VecDeque::new();
        let mut next = 0u8;
        for (write, n) in ops {
            if write {
                let src: Vec<u8> = (0..n).map(|_| { next = next.wrapping_add(1); next }).collect();
                let w = ring.write(&src);
                prop_assert_eq!(w as u64, (n as u64).min(ring.capacity() - model.len() as u64));
                model.extend(&src[..w]);
                // Bytes the ring refused are never produced.
                next = next.wrapping_sub((n - w) as u8);
            } else {
                let got = ring.read(n as u64);
                let want: Vec<u8> = model.drain(..n.min(model.len())).collect();
                prop_assert_eq!(got, want);
            }
            prop_assert_eq!(ring.len(), model.len() as u64);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn slot_grants_are_aligned_and_disjoint(lens in proptest::collection::vec(0u64..50_000, 1..40)) {
        let dir = tempfile::tempdir().unwrap();
        let region = Region::create(dir.path(), 1, RegionLayout::slot(1 << 20), 1 << 24).unwrap();
        let mut end = HEADER_BYTES;
        for len in lens {
            match region.grant_slot(len) {
                Ok(g) => {
                    prop_assert_eq!(g.offset % 64, 0);
                    prop_assert!(g.offset >= end);
                    prop_assert_eq!(g.length, len);
                    prop_assert!(g.offset + len <= region.slot_limit());
                    end = g.offset + len;
                }
                Err(ShmemError::RegionFull { .. }) => prop_assert!(len > region.slot_remaining()),
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }
    }

    #[test]
    fn sealed_slots_detect_tampering(data in proptest::collection::vec(any::<u8>(), 1..10_000), at in any::<prop::sample::Index>()) {
        let dir = tempfile::tempdir().unwrap();
        let region = Region::create(dir.path(), 3, RegionLayout::slot(1 << 16), 1 << 20).unwrap();
        let g = region.grant_slot(data.len() as u64).unwrap();
        region.fill(&g, 0, &data).unwrap();
        let g = region.seal(g).unwrap();
        prop_assert!(region.verify_slot(&g));
        let i = at.index(data.len());
        region.fill(&g, i as u64, &[data[i] ^ 0x01]).unwrap();
        prop_assert!(!region.verify_slot(&g));
    }
}
