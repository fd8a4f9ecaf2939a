//! The object store service.

use clap::Parser;
use nexus::store::{StoreProfile, StoreServer, StoreState};

#[derive(Parser)]
#[command(about = "In-memory object store with configurable latency and bandwidth")]
struct Args {
    #[arg(long, default_value = "127.0.0.1:9100")]
    listen: String,
    #[arg(long, default_value_t = 0)]
    latency_us: u64,
    #[arg(long, default_value_t = 10_000_000_000)]
    bandwidth_bps: u64,
}

#[tokio::main(flavor = "current_thread")]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .init();
    let a = Args::parse();
    anyhow::ensure!(a.bandwidth_bps > 0, "--bandwidth-bps must be positive");
    let server = StoreServer::start(&a.listen, StoreState::new(StoreProfile::new(a.latency_us, a.bandwidth_bps)))?;
    println!("store listening on {}", server.addr());
    shutdown_signal().await;
    let st = server.state();
    println!("{} objects, {} requests", st.object_count(), st.log().len());
    Ok(())
}

async fn shutdown_signal() {
    let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()).expect("SIGTERM handler");
    tokio::select! {
        _ = tokio::signal::ctrl_c() => {}
        _ = term.recv() => {}
    }
}
