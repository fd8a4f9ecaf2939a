//! SLO-bounded density: how many deployed functions a mode sustains.

use serde::{Deserialize, Serialize};

use crate::backend::{BackendConfig, FunctionConfig};
use crate::sandbox::Mode;
use crate::store::StoreProfile;

use super::gen::{function_name, generate_trace, nominal_event, GenParams};
use super::replay::{invoke_event, unloaded_medians};
use super::testbed::{Testbed, TestbedConfig};
use super::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepTemplate {
    /// Trace shape; `functions`, `events` and `rate_per_s` are set per step.
    pub trace: GenParams,
    /// Arrivals per second per deployed function.
    pub per_function_rate: f64,
    pub duration_s: f64,
    pub start: usize,
    pub step: usize,
    pub max_functions: usize,
    /// Invocations per function in the unloaded phase, the first discarded.
    pub unloaded_samples: usize,
    pub backend: BackendConfig,
    pub store: StoreProfile,
    pub modes: Vec<Mode>,
}

impl Default for SweepTemplate {
    fn default() -> Self {
        SweepTemplate {
            trace: GenParams::default(),
            per_function_rate: 2.0,
            duration_s: 3.0,
            start: 2,
            step: 2,
            max_functions: 12,
            unloaded_samples: 5,
            backend: BackendConfig::default(),
            store: StoreProfile::default(),
            modes: Mode::ALL.to_vec(),
        }
    }
}

impl SweepTemplate {
    pub fn from_json(bytes: &[u8]) -> Result<SweepTemplate, HarnessError> {
        serde_json::from_slice(bytes).map_err(|e| HarnessError::Schema(format!("sweep template: {e}")))
    }

    /// The backend config with every function of the sweep declared.
    fn backend_for(&self, n: usize) -> BackendConfig {
        let mut cfg = self.backend.clone();
        for f in 0..n {
            let name = function_name(f);
            if cfg.function(&name).is_none() {
                cfg.functions.push(FunctionConfig::new(&name));
            }
        }
        cfg
    }

    fn trace_for(&self, n: usize) -> GenParams {
        GenParams {
            functions: n,
            rate_per_s: self.per_function_rate * n as f64,
            events: (self.per_function_rate * n as f64 * self.duration_s).round().max(1.0) as usize,
            ..self.trace.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepStep {
    pub functions: usize,
    pub geomean_slowdown: f64,
    pub errors: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub mode: Mode,
    /// Largest passing function count; zero if none passed.
    pub density: usize,
    pub steps: Vec<SweepStep>,
}

/// For each mode, replays with a growing number of deployed functions until
/// the geometric-mean slowdown (p99 over unloaded median) exceeds
/// `slo_multiplier`, and returns the last passing count.
pub async fn density_sweep(t: &SweepTemplate, slo_multiplier: f64) -> Result<Vec<SweepResult>, HarnessError> {
    let mut out = Vec::new();
    let step = t.step.max(1);
    for &mode in &t.modes {
        // Unloaded medians, measured once per mode on an idle node.
        let unloaded = {
            let bed = Testbed::start(TestbedConfig {
                store: t.store,
                ..TestbedConfig::new(mode, t.backend_for(t.max_functions))
            })?;
            let p = t.trace_for(t.max_functions);
            let evs: Vec<_> = (0..t.max_functions).map(|f| nominal_event(&p, f, "unloaded")).collect();
            bed.seed(&evs);
            unloaded_medians(bed.client(), &evs, t.unloaded_samples).await
        };

        let mut density = 0;
        let mut steps = Vec::new();
        let mut n = t.start.max(1);
        while n <= t.max_functions {
            let bed = Testbed::start(TestbedConfig {
                store: t.store,
                ..TestbedConfig::new(mode, t.backend_for(n))
            })?;
            let p = t.trace_for(n);
            let events = generate_trace(&p);
            bed.seed(&events);
            // Deploying a function leaves one warm sandbox behind it.
            let warm: Vec<_> = (0..n).map(|f| nominal_event(&p, f, "warmup")).collect();
            bed.seed(&warm);
            for (i, ev) in warm.iter().enumerate() {
                invoke_event(bed.client(), i, ev).await;
            }
            let mut report = bed.replay(&events, 1.0).await;
            report.apply_unloaded(&unloaded);
            let g = report.geomean_slowdown().unwrap_or(f64::INFINITY);
            let pass = report.errors == 0 && g <= slo_multiplier;
            tracing::info!("{mode} n={n} geomean slowdown {g:.2} errors {}", report.errors);
            steps.push(SweepStep {
                functions: n,
                geomean_slowdown: g,
                errors: report.errors,
                pass,
            });
            if !pass {
                break;
            }
            density = n;
            n += step;
        }
        out.push(SweepResult { mode, density, steps });
    }
    Ok(out)
}
