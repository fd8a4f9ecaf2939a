//! Embedded mode: store and backend in this process, on their own runtimes.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::backend::{Backend, BackendConfig, BackendHost, BackendOptions, FaultInjector, Supervisor};
use crate::proto::TraceEvent;
use crate::sandbox::{FrameCapture, Mode};
use crate::store::{StoreOp, StoreProfile, StoreServer, StoreState};

use super::client::IngressClient;
use super::gen::seed_inputs;
use super::report::RunReport;
use super::HarnessError;

#[derive(Clone)]
pub struct TestbedConfig {
    pub mode: Mode,
    pub backend: BackendConfig,
    pub store: StoreProfile,
    /// Run the backend under a supervisor that restarts it when a fault
    /// point fires.
    pub faults: Option<Arc<FaultInjector>>,
    pub capture: Option<Arc<FrameCapture>>,
    /// Where regions and control endpoints live; a private temporary
    /// directory when absent.
    pub region_dir: Option<PathBuf>,
}

impl TestbedConfig {
    pub fn new(mode: Mode, backend: BackendConfig) -> Self {
        TestbedConfig {
            mode,
            backend,
            store: StoreProfile::default(),
            faults: None,
            capture: None,
            region_dir: None,
        }
    }
}

enum Served {
    Host(BackendHost),
    Supervised(Supervisor),
}

pub struct Testbed {
    served: Option<Served>,
    store: Option<StoreServer>,
    dir: PathBuf,
    owns_dir: bool,
    mode: Mode,
    client: IngressClient,
}

fn private_dir() -> PathBuf {
    crate::shmem::default_region_root().join(format!("nexus-{}-{:08x}", std::process::id(), rand::random::<u32>()))
}

impl Testbed {
    pub fn start(cfg: TestbedConfig) -> Result<Testbed, HarnessError> {
        let store = StoreServer::start("127.0.0.1:0", StoreState::new(cfg.store))?;
        let (dir, owns_dir) = match cfg.region_dir {
            Some(d) => (d, false),
            None => (private_dir(), true),
        };
        std::fs::create_dir_all(&dir)?;
        let mut opts = BackendOptions::new(cfg.backend, cfg.mode, store.addr(), dir.clone());
        opts.capture = cfg.capture;
        opts.faults = cfg.faults;
        let served = if opts.faults.is_some() {
            Served::Supervised(Supervisor::start(opts, "127.0.0.1:0")?)
        } else {
            Served::Host(BackendHost::start(&opts, "127.0.0.1:0")?)
        };
        let addr = match &served {
            Served::Host(h) => h.addr(),
            Served::Supervised(s) => s.addr(),
        };
        Ok(Testbed {
            served: Some(served),
            store: Some(store),
            dir,
            owns_dir,
            mode: cfg.mode,
            client: IngressClient::new(addr),
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn client(&self) -> &IngressClient {
        &self.client
    }

    pub fn region_dir(&self) -> &Path {
        &self.dir
    }

    pub fn store(&self) -> &Arc<StoreState> {
        self.store.as_ref().expect("store running").state()
    }

    /// The backend currently serving.
    pub fn backend(&self) -> Arc<Backend> {
        match self.served.as_ref().expect("backend running") {
            Served::Host(h) => h.backend().clone(),
            Served::Supervised(s) => s.backend().expect("backend restarted"),
        }
    }

    pub fn restarts(&self) -> u64 {
        match self.served.as_ref() {
            Some(Served::Supervised(s)) => s.restarts(),
            _ => 0,
        }
    }

    pub fn seed(&self, events: &[TraceEvent]) {
        seed_inputs(self.store(), events);
    }

    /// Replays `events` and completes the report with what only an
    /// embedded harness can see: the store's request log and object
    /// versions.
    pub async fn replay(&self, events: &[TraceEvent], speedup: f64) -> RunReport {
        let mut report = super::replay::replay(&self.client, events, self.mode, speedup).await;
        self.annotate(&mut report, events);
        report
    }

    pub fn annotate(&self, report: &mut RunReport, events: &[TraceEvent]) {
        let st = self.store();
        report.counters.store_gets = st.count(StoreOp::Get, None) as u64;
        report.counters.store_puts = st.count(StoreOp::Put, None) as u64;
        report.counters.duplicate_versions = events
            .iter()
            .filter_map(|e| e.output.as_ref())
            .filter_map(|o| st.get(&o.object))
            .filter(|o| o.version > 1)
            .count() as u64;
    }
}

impl Drop for Testbed {
    fn drop(&mut self) {
        drop(self.served.take());
        drop(self.store.take());
        if self.owns_dir {
            let _ = std::fs::remove_dir_all(&self.dir);
        }
    }
}
