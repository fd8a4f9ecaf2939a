//! Replay, fault plans and density sweeps through the library API.

use nexus::backend::{BackendConfig, FaultPoint, FunctionConfig};
use nexus::harness::*;
use nexus::proto::*;
use nexus::sandbox::{Mode, RestoreModel};
use nexus::store::{StoreOp, StoreProfile};

fn config(functions: &[&str]) -> BackendConfig {
    let mut cfg = BackendConfig::default();
    for f in functions {
        cfg.functions.push(FunctionConfig::new(f));
    }
    cfg.shmem.checksum_slots = false;
    cfg
}

fn obj(k: &str) -> ObjectRef {
    ObjectRef::new("hx", k).unwrap()
}

fn event(function: &str, input: Option<(&str, u64)>, compute_us: u64, output: Option<(&str, u64)>) -> TraceEvent {
    TraceEvent {
        t_ms: 0,
        function: function.into(),
        inputs: input.into_iter().map(|(k, size)| SizedRef { object: obj(k), size }).collect(),
        compute_us,
        output: output.map(|(k, size)| SizedRef { object: obj(k), size }),
        hinted: true,
        fail: false,
    }
}

fn slow_restore() -> RestoreModel {
    RestoreModel {
        base_us: 200_000,
        per_page_us: 0,
        ..Default::default()
    }
}

async fn single(mode: Mode, cfg: BackendConfig, store: StoreProfile, ev: &TraceEvent) -> InvocationRecord {
    let mut tc = TestbedConfig::new(mode, cfg);
    tc.store = store;
    let bed = Testbed::start(tc).unwrap();
    bed.seed(std::slice::from_ref(ev));
    let r = bed.replay(std::slice::from_ref(ev), 1.0).await;
    let rec = r.invocations.into_iter().next().unwrap();
    assert!(rec.ok, "{mode}: {:?}", rec.error);
    rec
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn empty_trace_gives_an_empty_report() {
    let bed = Testbed::start(TestbedConfig::new(Mode::OffloadedAsync, config(&[]))).unwrap();
    let r = bed.replay(&[], 1.0).await;
    assert!(r.invocations.is_empty());
    assert!(r.functions.is_empty());
    assert_eq!(r.errors, 0);
    assert_eq!(r.counters.store_gets + r.counters.store_puts + r.counters.retries, 0);
    assert_eq!(r.to_csv().lines().count(), 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn coupled_phases_add_up_to_the_total() {
    let mut cfg = config(&["acct"]);
    cfg.restore = slow_restore();
    let ev = event("acct", Some(("acct/in", 1 << 20)), 30_000, Some(("acct/out", 1 << 20)));
    let rec = single(Mode::Coupled, cfg, StoreProfile::new(50_000, 600_000_000), &ev).await;
    let b = rec.breakdown_us;
    let sum = b.queue + b.restore + b.prefetch + b.exec + b.writeback;
    assert!(b.total >= sum, "{b:?}");
    assert!(b.total - sum <= 5_000, "{} us unaccounted: {b:?}", b.total - sum);
    assert!(b.prefetch >= 50_000 && b.writeback >= 50_000, "{b:?}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn async_critical_path_overlaps_restore_and_prefetch() {
    let mut cfg = config(&["acct"]);
    cfg.restore = slow_restore();
    let ev = event("acct", Some(("acct/in", 1024)), 30_000, None);
    let rec = single(Mode::OffloadedAsync, cfg, StoreProfile::new(150_000, 600_000_000), &ev).await;
    let b = rec.breakdown_us;
    let path = b.queue + b.restore.max(b.prefetch) + b.exec;
    assert!(b.total >= path, "{b:?}");
    assert!(b.total - path <= 5_000 + b.writeback, "{b:?}");
    assert!(b.overlap >= 140_000, "{b:?}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn async_hides_the_fetch_of_an_io_heavy_event() {
    let mut cfg = config(&["heavy"]);
    cfg.restore = slow_restore();
    let store = StoreProfile::new(150_000, 600_000_000);
    let ev = event("heavy", Some(("heavy/in", 1024)), 10_000, None);
    let coupled = single(Mode::Coupled, cfg.clone(), store, &ev).await;
    let offl = single(Mode::OffloadedAsync, cfg, store, &ev).await;
    let hidden = coupled.breakdown_us.prefetch as f64;
    let gain = coupled.breakdown_us.total as f64 - offl.breakdown_us.total as f64;
    assert!(hidden >= 150_000.0);
    assert!((gain - hidden).abs() <= 0.15 * hidden, "gain {gain} us vs fetch {hidden} us");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn no_kills_leave_counters_at_zero() {
    let ev = event("fz", Some(("fz/in", 4096)), 0, Some(("fz/out", 100)));
    let tc = TestbedConfig::new(Mode::OffloadedAsync, config(&["fz"]));
    let (run, _bed) = run_with_faults(tc, &[ev], &FaultPlan::default(), 1.0).await.unwrap();
    assert_eq!(run.restarts, 0);
    assert!(run.fired.is_empty());
    assert_eq!(run.report.errors, 0);
    let c = &run.report.counters;
    assert_eq!((c.retries, c.duplicate_versions, c.backend.channel_reconnects), (0, 0, 0));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn kill_after_response_is_at_least_once() {
    let ev = event("fk", None, 0, Some(("fk/out", 100)));
    let tc = TestbedConfig::new(Mode::OffloadedAsync, config(&["fk"]));
    let plan = FaultPlan::kill(FaultPoint::PostResponsePreAck, 1);
    let (run, bed) = run_with_faults(tc, std::slice::from_ref(&ev), &plan, 1.0).await.unwrap();
    assert_eq!(run.fired, vec![FaultPoint::PostResponsePreAck]);
    assert_eq!(run.restarts, 1);
    assert_eq!(run.report.invocations.len(), 1);
    let rec = &run.report.invocations[0];
    assert!(rec.ok, "{:?}", rec.error);
    assert!(rec.attempts >= 2);
    let version = bed.store().get(&obj("fk/out")).unwrap().version;
    assert!((1..=2).contains(&version), "version {version}");
    assert_eq!(run.report.counters.duplicate_versions, (version == 2) as u64);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn kill_during_prefetch_costs_one_extra_get() {
    let ev = event("fp", Some(("fp/in", 8192)), 0, None);
    let tc = TestbedConfig::new(Mode::Offloaded, config(&["fp"]));
    let plan = FaultPlan::kill(FaultPoint::DuringPrefetch, 1);
    let (run, bed) = run_with_faults(tc, std::slice::from_ref(&ev), &plan, 1.0).await.unwrap();
    assert_eq!(run.fired, vec![FaultPoint::DuringPrefetch]);
    let rec = &run.report.invocations[0];
    assert!(rec.ok, "{:?}", rec.error);
    assert_eq!(bed.store().count(StoreOp::Get, Some(&obj("fp/in"))), 2);
    assert_eq!(run.report.counters.store_gets, 2);
    assert!(run.report.counters.retries >= 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn report_survives_json() {
    let bed = Testbed::start(TestbedConfig::new(Mode::Offloaded, config(&["js"]))).unwrap();
    let evs = vec![event("js", Some(("js/a", 100)), 0, None), event("js", None, 0, Some(("js/o", 10)))];
    bed.seed(&evs);
    let r = bed.replay(&evs, 1.0).await;
    let back: RunReport = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(back, r);
    assert_eq!(r.to_csv().lines().count(), 3);
    assert_eq!(r.functions.len(), 1);
    assert_eq!(r.functions[0].count, 2);
}

fn tiny_sweep() -> SweepTemplate {
    let mut backend = BackendConfig::default();
    backend.shmem.checksum_slots = false;
    backend.restore = RestoreModel {
        base_us: 5_000,
        per_page_us: 0,
        ..Default::default()
    };
    SweepTemplate {
        trace: GenParams {
            seed: 9,
            service_us: 5_000,
            ..Default::default()
        },
        per_function_rate: 4.0,
        duration_s: 0.5,
        start: 1,
        step: 1,
        max_functions: 3,
        unloaded_samples: 3,
        backend,
        store: StoreProfile::default(),
        modes: vec![Mode::OffloadedAsync],
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn unbounded_slo_sweeps_to_the_maximum() {
    let t = tiny_sweep();
    let r = density_sweep(&t, f64::INFINITY).await.unwrap();
    assert_eq!(r.len(), 1);
    assert_eq!(r[0].density, t.max_functions);
    assert_eq!(r[0].steps.iter().map(|s| s.functions).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert!(r[0].steps.iter().all(|s| s.pass && s.errors == 0));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn seeded_sweep_repeats() {
    let t = tiny_sweep();
    let a = density_sweep(&t, 5.0).await.unwrap();
    let b = density_sweep(&t, 5.0).await.unwrap();
    let shape = |r: &[SweepResult]| {
        r.iter()
            .map(|x| (x.mode, x.density, x.steps.iter().map(|s| (s.functions, s.pass, s.errors)).collect::<Vec<_>>()))
            .collect::<Vec<_>>()
    };
    assert_eq!(shape(&a), shape(&b));
    assert_eq!(generate_trace(&t.trace), generate_trace(&t.trace));
}

#[test]
fn sweep_template_rejects_unknown_fields() {
    assert!(SweepTemplate::from_json(br#"{"max_functions": 4}"#).is_ok());
    assert!(SweepTemplate::from_json(br#"{"max_fns": 4}"#).is_err());
}
