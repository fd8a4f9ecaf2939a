//! Per-function, per-client transfer rate limits.
//!
//! Each SDK client of a function gets an equal share of the function's rate.
//! The bucket holds at most one second of tokens and starts empty, so a
//! transfer's elapsed time is bounded below by `bytes / rate` from the first
//! byte; permits are handed out in arrival order by letting the balance go
//! negative and making the caller sleep off the debt.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

#[derive(Debug)]
struct BucketState {
    tokens: f64,
    last: Instant,
}

#[derive(Debug)]
pub struct TokenBucket {
    bytes_per_sec: f64,
    burst: f64,
    state: Mutex<BucketState>,
}

impl TokenBucket {
    /// `rate_bps` is in bits per second.
    pub fn new(rate_bps: u64) -> TokenBucket {
        assert!(rate_bps > 0, "rate must be positive");
        let bytes_per_sec = rate_bps as f64 / 8.0;
        TokenBucket {
            bytes_per_sec,
            burst: bytes_per_sec,
            state: Mutex::new(BucketState {
                tokens: 0.0,
                last: Instant::now(),
            }),
        }
    }

    pub fn rate_bps(&self) -> u64 {
        (self.bytes_per_sec * 8.0).round() as u64
    }

    /// Takes `n` bytes of tokens and returns how long the caller must wait
    /// before using them.
    pub fn reserve(&self, n: u64) -> Duration {
        if n == 0 {
            return Duration::ZERO;
        }
        let mut st = self.state.lock();
        let now = Instant::now();
        let refill = now.duration_since(st.last).as_secs_f64() * self.bytes_per_sec;
        st.tokens = (st.tokens + refill).min(self.burst);
        st.last = now;
        st.tokens -= n as f64;
        if st.tokens >= 0.0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(-st.tokens / self.bytes_per_sec)
        }
    }

    pub async fn acquire(&self, n: u64) {
        let wait = self.reserve(n);
        if !wait.is_zero() {
            tokio::time::sleep(wait).await;
        }
    }

    pub fn acquire_blocking(&self, n: u64) {
        let wait = self.reserve(n);
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

/// Buckets keyed by (function, client), created on first use.
#[derive(Debug, Default)]
pub struct RateLimits {
    buckets: Mutex<HashMap<(String, String), Arc<TokenBucket>>>,
}

impl RateLimits {
    pub fn new() -> Self {
        Self::default()
    }

    /// The bucket for one client of a function whose total rate is
    /// `rate_bps`, split equally across `n_clients`.
    pub fn bucket(&self, function: &str, client: &str, rate_bps: u64, n_clients: usize) -> Arc<TokenBucket> {
        let share = per_client_rate(rate_bps, n_clients);
        let mut map = self.buckets.lock();
        let key = (function.to_string(), client.to_string());
        match map.get(&key) {
            Some(b) if b.rate_bps() == share => b.clone(),
            _ => {
                let b = Arc::new(TokenBucket::new(share));
                map.insert(key, b.clone());
                b
            }
        }
    }

    pub fn clear(&self) {
        self.buckets.lock().clear();
    }
}

pub fn per_client_rate(rate_bps: u64, n_clients: usize) -> u64 {
    (rate_bps / n_clients.max(1) as u64).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_bytes_is_immediate() {
        let b = TokenBucket::new(8);
        assert_eq!(b.reserve(0), Duration::ZERO);
    }

    #[test]
    fn empty_start_charges_from_first_byte() {
        let b = TokenBucket::new(8_000_000); // 1 MB/s
        let w = b.reserve(500_000);
        assert!((w.as_secs_f64() - 0.5).abs() < 0.01, "{w:?}");
        // queued behind the first reservation
        let w2 = b.reserve(500_000);
        assert!((w2.as_secs_f64() - 1.0).abs() < 0.01, "{w2:?}");
    }

    #[test]
    fn burst_caps_idle_accumulation() {
        let b = TokenBucket::new(8_000_000);
        b.state.lock().last -= Duration::from_secs(5);
        assert_eq!(b.reserve(1_000_000), Duration::ZERO);
        assert!(b.reserve(1).as_nanos() > 0);
    }

    #[test]
    fn equal_split() {
        let limits = RateLimits::new();
        let a = limits.bucket("f", "s3", 600_000_000, 2);
        let b = limits.bucket("f", "dynamo", 600_000_000, 2);
        assert_eq!(a.rate_bps(), 300_000_000);
        assert_eq!(b.rate_bps(), 300_000_000);
        assert!(!Arc::ptr_eq(&a, &b));
        assert!(Arc::ptr_eq(&a, &limits.bucket("f", "s3", 600_000_000, 2)));
    }

    #[tokio::test]
    async fn async_rate_holds() {
        let b = TokenBucket::new(80_000_000); // 10 MB/s
        let t0 = Instant::now();
        for _ in 0..20 {
            b.acquire(100_000).await;
        }
        let e = t0.elapsed().as_secs_f64();
        assert!((0.19..0.23).contains(&e), "{e}");
    }
}
