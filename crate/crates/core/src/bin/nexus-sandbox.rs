//! The in-sandbox runtime: attaches to the backend and runs the synthetic
//! handler for every invocation it receives.

use std::net::SocketAddr;
use std::path::PathBuf;

use clap::Parser;
use nexus::sandbox::{run_sandbox, Mode, SandboxParams};

#[derive(Parser)]
#[command(about = "Sandbox runtime with the synthetic handler")]
struct Args {
    #[arg(long)]
    sandbox_id: u64,
    /// Control endpoint; defaults to $NEXUS_CONTROL.
    #[arg(long)]
    control: Option<PathBuf>,
    /// Region file; defaults to $NEXUS_REGION.
    #[arg(long)]
    region: Option<PathBuf>,
    #[arg(long)]
    function: String,
    #[arg(long, default_value = "offloaded-async")]
    mode: Mode,
    /// Store address, for coupled mode.
    #[arg(long)]
    store: Option<SocketAddr>,
    #[arg(long, default_value_t = 0)]
    rate_limit_bps: u64,
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let a = Args::parse();
    let control = a
        .control
        .or_else(|| std::env::var_os("NEXUS_CONTROL").map(PathBuf::from))
        .ok_or_else(|| anyhow::anyhow!("no control endpoint: pass --control or set NEXUS_CONTROL"))?;
    let region = a.region.or_else(|| std::env::var_os("NEXUS_REGION").map(PathBuf::from));
    run_sandbox(&SandboxParams {
        sandbox_id: a.sandbox_id,
        control,
        region: if a.mode.is_offloaded() { region } else { None },
        function: a.function,
        mode: a.mode,
        store: a.store,
        rate_limit_bps: a.rate_limit_bps,
    })?;
    Ok(())
}
