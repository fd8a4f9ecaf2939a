//! Ingress, load generator, and reporting.

use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use nexus::backend::{BackendConfig, FunctionConfig};
use nexus::harness::*;
use nexus::proto::{parse_trace, write_trace};
use nexus::sandbox::{synthetic_bytes, Mode};
use nexus::store::{StoreClient, StoreProfile};

#[derive(Parser)]
#[command(about = "Trace replay, density sweeps, and trace generation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Replay a JSON-lines trace and write a report.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        mode: Mode,
        #[arg(long)]
        report: PathBuf,
        /// CSV export; defaults to the report path with a .csv extension.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Replay against a running backend instead of an embedded one.
        #[arg(long)]
        ingress: Option<SocketAddr>,
        /// Store to seed inputs into when replaying against `--ingress`.
        #[arg(long)]
        store: Option<SocketAddr>,
        /// Backend configuration for embedded mode.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        store_latency_us: u64,
        #[arg(long, default_value_t = 10_000_000_000)]
        store_bandwidth_bps: u64,
        #[arg(long, default_value_t = 1.0)]
        speedup: f64,
    },
    /// Find the largest function count meeting the SLO, per mode.
    Sweep {
        #[arg(long)]
        template: PathBuf,
        #[arg(long, default_value_t = 5.0)]
        slo: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic trace.
    GenTrace {
        #[arg(long, default_value_t = 4)]
        functions: usize,
        /// Mean arrivals per second.
        #[arg(long, default_value_t = 20.0)]
        rate: f64,
        #[arg(long, default_value_t = 0.5)]
        io_ratio: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        events: usize,
        #[arg(long, default_value_t = 20_000)]
        service_us: u64,
        #[arg(long, default_value_t = 0.96)]
        hinted_fraction: f64,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().cmd {
        Cmd::GenTrace {
            functions,
            rate,
            io_ratio,
            seed,
            events,
            service_us,
            hinted_fraction,
            out,
        } => {
            anyhow::ensure!(functions > 0, "--functions must be positive");
            let p = GenParams {
                seed,
                functions,
                rate_per_s: rate,
                events,
                io_ratio,
                service_us,
                hinted_fraction,
                ..Default::default()
            };
            let text = write_trace(&generate_trace(&p));
            match out {
                Some(path) => std::fs::write(&path, text).with_context(|| path.display().to_string())?,
                None => print!("{text}"),
            }
        }
        Cmd::Replay {
            trace,
            mode,
            report,
            csv,
            ingress,
            store,
            config,
            store_latency_us,
            store_bandwidth_bps,
            speedup,
        } => {
            let text = std::fs::read_to_string(&trace).with_context(|| trace.display().to_string())?;
            let events = parse_trace(&text)?;
            let rep = match ingress {
                Some(addr) => {
                    if let Some(s) = store {
                        let client = StoreClient::new(s);
                        let mut seen = std::collections::HashSet::new();
                        for e in &events {
                            for i in &e.inputs {
                                if seen.insert(i.object.clone()) {
                                    client.put(&i.object, &synthetic_bytes(&i.object, i.size)).await?;
                                }
                            }
                        }
                    }
                    replay(&IngressClient::new(addr), &events, mode, speedup).await
                }
                None => {
                    let mut cfg = match config {
                        Some(p) => BackendConfig::load(&p)?,
                        None => BackendConfig::default(),
                    };
                    for f in trace_functions(&events) {
                        if cfg.function(&f).is_none() {
                            cfg.functions.push(FunctionConfig::new(&f));
                        }
                    }
                    let mut tc = TestbedConfig::new(mode, cfg);
                    tc.store = StoreProfile::new(store_latency_us, store_bandwidth_bps);
                    let bed = Testbed::start(tc)?;
                    bed.seed(&events);
                    bed.replay(&events, speedup).await
                }
            };
            std::fs::write(&report, rep.to_json()).with_context(|| report.display().to_string())?;
            let csv = csv.unwrap_or_else(|| report.with_extension("csv"));
            std::fs::write(&csv, rep.to_csv()).with_context(|| csv.display().to_string())?;
            println!(
                "{} invocations, {} errors, mean latency {:.0} us, mean io wait {:.0} us",
                rep.invocations.len(),
                rep.errors,
                rep.mean_latency_us,
                rep.mean_io_wait_us
            );
            for f in &rep.functions {
                println!("{:<12} n={:<5} p50={:>8} us p99={:>8} us", f.function, f.count, f.p50_us, f.p99_us);
            }
        }
        Cmd::Sweep { template, slo, out } => {
            let bytes = std::fs::read(&template).with_context(|| template.display().to_string())?;
            let t = SweepTemplate::from_json(&bytes)?;
            let results = density_sweep(&t, slo).await?;
            for r in &results {
                println!("{:<16} density {}", r.mode.to_string(), r.density);
            }
            let json = serde_json::to_string_pretty(&results)?;
            match out {
                Some(path) => std::fs::write(&path, json).with_context(|| path.display().to_string())?,
                None => println!("{json}"),
            }
        }
    }
    Ok(())
}
