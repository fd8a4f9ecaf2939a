//! The backend daemon.

use std::net::SocketAddr;
use std::path::PathBuf;

use clap::Parser;
use nexus::backend::{BackendConfig, BackendHost, BackendOptions};
use nexus::sandbox::Mode;

#[derive(Parser)]
#[command(about = "Node-local backend serving sandboxes over shared memory")]
struct Args {
    /// JSON configuration (see CONFIG.md).
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "127.0.0.1:9200")]
    listen_ingress: String,
    #[arg(long)]
    store: SocketAddr,
    /// Defaults to a `nexus` directory under /dev/shm.
    #[arg(long)]
    region_dir: Option<PathBuf>,
    #[arg(long, default_value = "offloaded-async")]
    mode: Mode,
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .init();
    let a = Args::parse();
    let cfg = BackendConfig::load(&a.config)?;
    let region_dir = a.region_dir.unwrap_or_else(|| nexus::shmem::default_region_root().join("nexus"));
    std::fs::create_dir_all(&region_dir)?;
    let host = BackendHost::start(&BackendOptions::new(cfg, a.mode, a.store, region_dir), &a.listen_ingress)?;
    println!("backend ({}) listening on {}", a.mode, host.addr());
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    rt.block_on(async {
        let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate())?;
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
        anyhow::Ok(())
    })?;
    println!("{}", serde_json::to_string_pretty(&host.backend().metrics())?);
    host.shutdown();
    Ok(())
}
