//! The sandbox-side library against a scripted backend.

use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use nexus::frontend::*;
use nexus::proto::*;
use nexus::shmem::*;

struct Scratch(PathBuf);

impl Scratch {
    fn new(tag: &str) -> Scratch {
        let d = default_region_root().join(format!("nexus-fe-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&d);
        std::fs::create_dir_all(&d).unwrap();
        Scratch(d)
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn recv(s: &mut UnixStream) -> Frame {
    read_frame(s).unwrap().expect("frame")
}

fn send<M: Message>(s: &mut UnixStream, m: &M) {
    write_frame(s, M::TYPE, &m.encode()).unwrap();
}

fn obj(k: &str) -> ObjectRef {
    ObjectRef::new("b", k).unwrap()
}

fn setup(dir: &Path) -> (Region, PathBuf, UnixListener) {
    let region = Region::create(dir, 1, RegionLayout::slot(1 << 20).with_ring(1 << 16), 1 << 24).unwrap();
    let ctl = dir.join("ctl");
    let listener = UnixListener::bind(&ctl).unwrap();
    (region, ctl, listener)
}

fn invoke(s: &mut UnixStream, flags: u8) {
    send(
        s,
        &Invoke {
            invocation_id: InvocationId::random(),
            flags,
            event_body: b"{}".to_vec(),
        },
    );
}

#[test]
fn corrupted_magic_is_an_attach_error() {
    let d = Scratch::new("magic");
    let (region, ctl, _l) = setup(&d.0);
    let path = region.descriptor().file_name.clone();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xFF;
    std::fs::write(&path, &bytes).unwrap();
    match ClientSession::attach(&ctl, Some(&path), 1) {
        Err(FrontendError::Attach(_)) => {}
        other => panic!("expected an attach error, got {:?}", other.map(|s| s.sandbox_id())),
    }
}

#[test]
fn slot_get_and_put_round_trip() {
    let d = Scratch::new("slot");
    let (region, ctl, listener) = setup(&d.0);
    let data: Vec<u8> = (0..100_000u32).map(|i| (i % 251) as u8).collect();
    let g = region.grant_slot(data.len() as u64).unwrap();
    region.fill(&g, 0, &data).unwrap();
    let path = region.descriptor().file_name.clone();
    let expected = data.clone();

    let sandbox = thread::spawn(move || {
        let mut s = ClientSession::attach(&ctl, Some(&path), 1).unwrap();
        s.next_invocation().unwrap().unwrap();
        let body = s.get_object(&obj("in")).unwrap();
        let Body::View { view, .. } = body else {
            panic!("expected a slot view, got {body:?}");
        };
        assert_eq!(&view[..], &expected[..]);
        let out = s.put_object(&obj("out"), b"result bytes", false).unwrap();
        assert_eq!(out, PutOutcome::Stored { version: 7 });
        assert!(matches!(s.get_object(&obj("missing")), Err(FrontendError::NotFound(_))));
        let c = s.counters();
        assert_eq!(c.slot_gets, 1);
        assert_eq!(c.get_payload_copies, 0);
        assert_eq!((c.puts, c.put_payload_copies), (1, 1));
        s.respond(Status::Ok, b"ten bytes!", 1, 2, 3).unwrap();
        assert!(!view.is_valid(), "views outlive the invocation");
        assert!(matches!(s.respond(Status::Ok, b"", 0, 0, 0), Err(FrontendError::IllegalState(_))));
    });

    let (mut s, _) = listener.accept().unwrap();
    invoke(&mut s, 0);
    let f = recv(&mut s);
    let get = GetReq::decode(&f.body).unwrap();
    assert_eq!(get.object, obj("in"));
    send(
        &mut s,
        &GetResp {
            request_id: get.request_id,
            status: Status::Ok,
            mode: TransferMode::Slot,
            offset: g.offset,
            length: g.length,
        },
    );
    let reserve = PutReq::decode(&recv(&mut s).body).unwrap();
    assert_eq!((reserve.phase, reserve.length, reserve.flags), (PutPhase::Reserve, 12, 0));
    assert!(reserve.request_id > get.request_id);
    let pg = region.grant_slot(reserve.length).unwrap();
    send(
        &mut s,
        &PutAck {
            request_id: reserve.request_id,
            status: Status::Granted,
            offset: pg.offset,
            version: 0,
        },
    );
    let commit = PutReq::decode(&recv(&mut s).body).unwrap();
    assert_eq!((commit.phase, commit.offset), (PutPhase::Commit, pg.offset));
    assert_eq!(region.window(pg.offset, 12).unwrap(), b"result bytes");
    send(
        &mut s,
        &PutAck {
            request_id: commit.request_id,
            status: Status::Ok,
            offset: pg.offset,
            version: 7,
        },
    );
    let miss = GetReq::decode(&recv(&mut s).body).unwrap();
    send(
        &mut s,
        &GetResp {
            request_id: miss.request_id,
            status: Status::NotFound,
            mode: TransferMode::Slot,
            offset: 0,
            length: 0,
        },
    );
    let f = recv(&mut s);
    assert_eq!(f.kind().unwrap(), MessageType::FnResponse);
    let r = FnResponse::decode(&f.body).unwrap();
    assert_eq!(r.payload, b"ten bytes!");
    assert_eq!((r.fetch_us, r.compute_us, r.write_us), (1, 2, 3));
    sandbox.join().unwrap();
}

#[test]
fn delegated_put_returns_without_a_version() {
    let d = Scratch::new("async");
    let (region, ctl, listener) = setup(&d.0);
    let path = region.descriptor().file_name.clone();
    let sandbox = thread::spawn(move || {
        let mut s = ClientSession::attach(&ctl, Some(&path), 1).unwrap();
        let inv = s.next_invocation().unwrap().unwrap();
        assert!(inv.delegate_writes());
        let mut client = SessionClient::new(&mut s, inv.delegate_writes());
        let out = client.put_object("b", "out", &[1u8; 4096]).unwrap();
        assert_eq!(out.version_id, None);
        s.respond(Status::Ok, b"", 0, 0, 0).unwrap();
    });
    let (mut s, _) = listener.accept().unwrap();
    invoke(&mut s, INVOKE_DELEGATE_WRITES);
    let reserve = PutReq::decode(&recv(&mut s).body).unwrap();
    assert!(reserve.is_async());
    let pg = region.grant_slot(reserve.length).unwrap();
    send(&mut s, &PutAck { request_id: reserve.request_id, status: Status::Granted, offset: pg.offset, version: 0 });
    let commit = PutReq::decode(&recv(&mut s).body).unwrap();
    assert!(commit.is_async());
    send(&mut s, &PutAck { request_id: commit.request_id, status: Status::Delegated, offset: pg.offset, version: 0 });
    assert_eq!(recv(&mut s).kind().unwrap(), MessageType::FnResponse);
    sandbox.join().unwrap();
}

#[test]
fn ring_get_streams_the_whole_object() {
    let d = Scratch::new("ring");
    let (region, ctl, listener) = setup(&d.0);
    let path = region.descriptor().file_name.clone();
    let data: Vec<u8> = (0..1_000_000u32).map(|i| (i * 7 % 253) as u8).collect();
    let want = fnv1a64(&data);
    let sandbox = thread::spawn(move || {
        let mut s = ClientSession::attach(&ctl, Some(&path), 1).unwrap();
        s.next_invocation().unwrap().unwrap();
        let mut body = s.get_object(&obj("big")).unwrap();
        assert_eq!(body.len(), 1_000_000);
        assert_eq!(body.checksum().unwrap(), want);
        assert_eq!(s.counters().ring_gets, 1);
        s.respond(Status::Ok, b"", 0, 0, 0).unwrap();
    });
    let (mut s, _) = listener.accept().unwrap();
    invoke(&mut s, INVOKE_OPAQUE);
    let get = GetReq::decode(&recv(&mut s).body).unwrap();
    send(
        &mut s,
        &GetResp {
            request_id: get.request_id,
            status: Status::Ok,
            mode: TransferMode::Ring,
            offset: 0,
            length: data.len() as u64,
        },
    );
    let ring = region.ring().unwrap();
    let deadline = std::time::Instant::now() + Duration::from_secs(20);
    let mut off = 0;
    while off < data.len() {
        let n = ring.write(&data[off..]);
        off += n;
        if n == 0 {
            assert!(std::time::Instant::now() < deadline, "reader stalled");
            assert!(!sandbox.is_finished(), "reader exited early");
            thread::yield_now();
        }
        assert!(ring.len() <= ring.capacity());
    }
    send(&mut s, &StreamClose { request_id: get.request_id, status: Status::Ok, total: data.len() as u64 });
    assert_eq!(recv(&mut s).kind().unwrap(), MessageType::FnResponse);
    sandbox.join().unwrap();
}

#[test]
fn oversized_response_payload_is_rejected() {
    let d = Scratch::new("big-resp");
    let (region, ctl, listener) = setup(&d.0);
    let path = region.descriptor().file_name.clone();
    let sandbox = thread::spawn(move || {
        let mut s = ClientSession::attach(&ctl, Some(&path), 1).unwrap();
        s.next_invocation().unwrap().unwrap();
        let big = vec![0u8; MAX_EVENT_BODY + 1];
        assert!(matches!(s.respond(Status::Ok, &big, 0, 0, 0), Err(FrontendError::PayloadTooLarge(_))));
        s.respond(Status::Ok, b"", 0, 0, 0).unwrap();
    });
    let (mut s, _) = listener.accept().unwrap();
    invoke(&mut s, 0);
    assert_eq!(recv(&mut s).kind().unwrap(), MessageType::FnResponse);
    sandbox.join().unwrap();
}

#[test]
fn attach_waits_for_a_late_backend() {
    let d = Scratch::new("late");
    let region = Region::create(&d.0, 1, RegionLayout::slot(4096), 1 << 20).unwrap();
    let path = region.descriptor().file_name.clone();
    let ctl = d.0.join("ctl");
    let c = ctl.clone();
    let sandbox = thread::spawn(move || {
        let mut s = ClientSession::attach(&c, Some(&path), 1).unwrap();
        s.next_invocation().unwrap()
    });
    thread::sleep(Duration::from_millis(150));
    let listener = UnixListener::bind(&ctl).unwrap();
    let (s, _) = listener.accept().unwrap();
    drop(s);
    assert!(sandbox.join().unwrap().is_none(), "a closed channel ends the sandbox");
}

#[test]
fn attach_gives_up_after_its_budget() {
    let d = Scratch::new("never");
    let opts = AttachOptions {
        retries: 3,
        initial_backoff: Duration::from_millis(1),
        max_backoff: Duration::from_millis(2),
    };
    assert!(matches!(
        ClientSession::attach_with(&d.0.join("nobody"), None, 1, opts),
        Err(FrontendError::Attach(_))
    ));
}
