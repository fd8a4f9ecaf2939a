//! Running a backend on its own runtime, and restarting it after a crash.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;

use super::daemon::{Backend, BackendOptions};
use super::BackendError;

fn bind_retrying(addr: &str) -> std::io::Result<std::net::TcpListener> {
    let mut last = None;
    for _ in 0..50 {
        match std::net::TcpListener::bind(addr) {
            Ok(l) => return Ok(l),
            Err(e) => {
                last = Some(e);
                std::thread::sleep(Duration::from_millis(20));
            }
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Stops a runtime, waiting up to `timeout` unless the caller is itself
/// async, where blocking is not allowed.
fn stop_runtime(rt: tokio::runtime::Runtime, timeout: Duration) {
    if tokio::runtime::Handle::try_current().is_ok() {
        rt.shutdown_background();
    } else {
        rt.shutdown_timeout(timeout);
    }
}

/// A backend serving ingress on a private multi-threaded runtime.
pub struct BackendHost {
    rt: Option<tokio::runtime::Runtime>,
    backend: Arc<Backend>,
    addr: SocketAddr,
}

impl BackendHost {
    pub fn start(opts: &BackendOptions, listen: &str) -> Result<BackendHost, BackendError> {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .thread_name("nexus-backend")
            .enable_all()
            .build()?;
        let std_listener = bind_retrying(listen)?;
        std_listener.set_nonblocking(true)?;
        let addr = std_listener.local_addr()?;
        let backend = {
            let _guard = rt.enter();
            Backend::new(opts)?
        };
        let listener = {
            let _guard = rt.enter();
            tokio::net::TcpListener::from_std(std_listener)?
        };
        rt.spawn(backend.clone().serve_ingress(listener));
        tracing::info!("backend ({}) listening on {addr}", opts.mode);
        Ok(BackendHost {
            rt: Some(rt),
            backend,
            addr,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn backend(&self) -> &Arc<Backend> {
        &self.backend
    }

    /// Dies abruptly: every task is dropped mid-flight, connections close,
    /// sandboxes are killed. Nothing is flushed.
    pub fn crash(mut self) {
        if let Some(rt) = self.rt.take() {
            stop_runtime(rt, Duration::from_millis(100));
        }
        self.backend.manager().shutdown();
    }

    /// Stops serving and releases every sandbox.
    pub fn shutdown(mut self) {
        self.backend.manager().shutdown();
        if let Some(rt) = self.rt.take() {
            stop_runtime(rt, Duration::from_secs(1));
        }
    }
}

impl Drop for BackendHost {
    fn drop(&mut self) {
        if let Some(rt) = self.rt.take() {
            self.backend.manager().shutdown();
            rt.shutdown_background();
        }
    }
}

/// Restarts a backend, on the same address, whenever an armed fault point
/// fires.
pub struct Supervisor {
    host: Arc<Mutex<Option<BackendHost>>>,
    restarts: Arc<AtomicU64>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
    addr: SocketAddr,
}

impl Supervisor {
    pub fn start(opts: BackendOptions, listen: &str) -> Result<Supervisor, BackendError> {
        let faults = opts
            .faults
            .clone()
            .ok_or_else(|| BackendError::Config("a supervised backend needs a fault injector".into()))?;
        let rx = faults.subscribe();
        let first = BackendHost::start(&opts, listen)?;
        let addr = first.addr();
        let host = Arc::new(Mutex::new(Some(first)));
        let restarts = Arc::new(AtomicU64::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let thread = {
            let host = host.clone();
            let restarts = restarts.clone();
            let stop = stop.clone();
            std::thread::Builder::new()
                .name("nexus-supervisor".into())
                .spawn(move || {
                    while !stop.load(Ordering::Acquire) {
                        let Ok(point) = rx.recv_timeout(Duration::from_millis(50)) else {
                            continue;
                        };
                        let mut slot = host.lock();
                        if let Some(h) = slot.take() {
                            h.crash();
                        }
                        tracing::info!("backend killed at {point:?}; restarting");
                        match BackendHost::start(&opts, &addr.to_string()) {
                            Ok(h) => *slot = Some(h),
                            Err(e) => {
                                tracing::error!("restart failed: {e}");
                                return;
                            }
                        }
                        restarts.fetch_add(1, Ordering::AcqRel);
                    }
                })?
        };
        Ok(Supervisor {
            host,
            restarts,
            stop,
            thread: Some(thread),
            addr,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn restarts(&self) -> u64 {
        self.restarts.load(Ordering::Acquire)
    }

    /// The backend currently serving.
    pub fn backend(&self) -> Option<Arc<Backend>> {
        self.host.lock().as_ref().map(|h| h.backend().clone())
    }
}

impl Drop for Supervisor {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        if let Some(h) = self.host.lock().take() {
            h.shutdown();
        }
    }
}
