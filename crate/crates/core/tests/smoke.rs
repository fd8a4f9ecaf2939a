use nexus::backend::{BackendConfig, FunctionConfig};
use nexus::harness::*;
use nexus::sandbox::Mode;

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn one_event_each_mode() {
    for mode in Mode::ALL {
        let mut cfg = BackendConfig::default();
        cfg.functions.push(FunctionConfig::new("fn000"));
        let bed = Testbed::start(TestbedConfig::new(mode, cfg)).unwrap();
        let p = GenParams { functions: 1, events: 3, ..Default::default() };
        let evs = generate_trace(&p);
        bed.seed(&evs);
        let r = bed.replay(&evs, 1.0).await;
        println!("{}", r.to_json());
        assert_eq!(r.errors, 0, "{mode}");
    }
}
