use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

macro_rules! counters {
    ($($name:ident),* $(,)?) => {
        /// Live backend counters.
        #[derive(Debug, Default)]
        pub struct Metrics {
            $(pub $name: AtomicU64,)*
        }

        /// A point-in-time copy of [`Metrics`], as reported by a status query.
        #[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
        #[serde(default)]
        pub struct MetricsSnapshot {
            $(pub $name: u64,)*
            pub cold_starts: u64,
            pub warm_starts: u64,
            pub evictions: u64,
            pub live_sandboxes: u64,
            pub idle_sandboxes: u64,
        }

        impl Metrics {
            pub fn snapshot(&self) -> MetricsSnapshot {
                MetricsSnapshot {
                    $($name: self.$name.load(Ordering::Relaxed),)*
                    ..Default::default()
                }
            }
        }
    };
}

counters!(
    invocations,
    responses_ok,
    responses_error,
    prefetch_filled,
    prefetch_failed,
    prefetch_skipped,
    hint_mismatches,
    slot_hits,
    sync_slot_gets,
    ring_gets,
    store_gets,
    store_puts,
    delegated_writes,
    write_retries,
    write_failures,
    ring_puts,
    bytes_into_slots,
    bytes_through_ring,
    peak_region_usage,
    channel_reconnects,
    protocol_errors,
);

impl Metrics {
    pub fn inc(c: &AtomicU64) {
        c.fetch_add(1, Ordering::Relaxed);
    }

    pub fn add(c: &AtomicU64, n: u64) {
        c.fetch_add(n, Ordering::Relaxed);
    }

    pub fn max(c: &AtomicU64, n: u64) {
        c.fetch_max(n, Ordering::Relaxed);
    }
}
