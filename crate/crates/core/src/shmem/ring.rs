//! Single-producer/single-consumer byte ring.
//!
//! Control block layout (at the ring area offset, little-endian):
//!
//! ```text
//! +0    head     u64  consumer counter, free-running
//! +8    capacity u64  bytes, power of two
//! +64   tail     u64  producer counter, free-running
//! +128  data     [u8; capacity]
//! ```
//!
//! Counters never wrap back to a modular position, so `tail - head` is the
//! occupancy and full/empty are never ambiguous. The producer publishes
//! `tail` with release ordering after copying bytes in, the consumer
//! publishes `head` with release ordering after copying bytes out, and each
//! side loads the other's counter with acquire ordering.

use std::any::Any;
use std::ptr::NonNull;
use std::sync::Arc;
use std::sync::atomic::{AtomicU64, Ordering};

pub const RING_CTRL_BYTES: u64 = 128;
const HEAD_OFF: usize = 0;
const CAP_OFF: usize = 8;
const TAIL_OFF: usize = 64;

/// A handle onto a ring living in some byte area. Cloning the handle does not
/// clone the ring; the SPSC contract (one producer, one consumer at a time)
/// is on the caller.
#[derive(Clone)]
pub struct Ring {
    ctrl: NonNull<u8>,
    data: NonNull<u8>,
    capacity: u64,
    _backing: Arc<dyn Any + Send + Sync>,
}

// SAFETY: all cross-party state is accessed through atomics or through byte
// ranges that the counter protocol hands to exactly one side at a time.
unsafe impl Send for Ring {}
unsafe impl Sync for Ring {}

impl std::fmt::Debug for Ring {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Ring")
            .field("capacity", &self.capacity)
            .field("head", &self.head())
            .field("tail", &self.tail())
            .finish()
    }
}

impl Ring {
    /// # Safety
    /// `area` must point to at least `RING_CTRL_BYTES + capacity` bytes,
    /// 64-byte aligned, that stay valid while `backing` is alive.
    pub(crate) unsafe fn from_raw(area: *mut u8, capacity: u64, backing: Arc<dyn Any + Send + Sync>) -> Ring {
        assert!(capacity.is_power_of_two(), "ring capacity must be a power of two");
        assert_eq!(area as usize % 64, 0, "ring area must be cache-line aligned");
        Ring {
            ctrl: NonNull::new(area).expect("non-null ring area"),
            data: NonNull::new(area.add(RING_CTRL_BYTES as usize)).unwrap(),
            capacity,
            _backing: backing,
        }
    }

    /// # Safety
    /// As [`Ring::from_raw`]; additionally nobody may be using the ring.
    pub(crate) unsafe fn init(area: *mut u8, capacity: u64) {
        (*(area.add(HEAD_OFF) as *const AtomicU64)).store(0, Ordering::Relaxed);
        (*(area.add(CAP_OFF) as *const AtomicU64)).store(capacity, Ordering::Relaxed);
        (*(area.add(TAIL_OFF) as *const AtomicU64)).store(0, Ordering::Release);
    }

    /// A ring over a private heap allocation, for tests and in-process use.
    pub fn heap(capacity: u64) -> Ring {
        assert!(capacity.is_power_of_two());
        let words = ((RING_CTRL_BYTES + capacity) as usize).div_ceil(64) * 8;
        let buf: Box<[AlignedLine]> = (0..words / 8).map(|_| AlignedLine([0; 8])).collect();
        let backing = Arc::new(HeapBacking(std::cell::UnsafeCell::new(buf)));
        let ptr = unsafe { (*backing.0.get()).as_mut_ptr() as *mut u8 };
        unsafe {
            Ring::init(ptr, capacity);
            Ring::from_raw(ptr, capacity, backing)
        }
    }

    fn head_atomic(&self) -> &AtomicU64 {
        unsafe { &*(self.ctrl.as_ptr().add(HEAD_OFF) as *const AtomicU64) }
    }

    fn tail_atomic(&self) -> &AtomicU64 {
        unsafe { &*(self.ctrl.as_ptr().add(TAIL_OFF) as *const AtomicU64) }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn head(&self) -> u64 {
        self.head_atomic().load(Ordering::Acquire)
    }

    pub fn tail(&self) -> u64 {
        self.tail_atomic().load(Ordering::Acquire)
    }

    /// Bytes currently in flight.
    pub fn len(&self) -> u64 {
        let tail = self.tail();
        let head = self.head();
        let used = tail.wrapping_sub(head);
        self.check(used);
        used
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    fn check(&self, used: u64) {
        debug_assert!(used <= self.capacity, "ring occupancy {used} exceeds capacity {}", self.capacity);
    }

    /// Producer side. Copies as much of `src` as fits and publishes the new
    /// tail. Zero means the ring is full.
    pub fn write(&self, src: &[u8]) -> usize {
        let tail = self.tail_atomic().load(Ordering::Relaxed);
        let head = self.head_atomic().load(Ordering::Acquire);
        let used = tail.wrapping_sub(head);
        self.check(used);
        let n = (self.capacity - used).min(src.len() as u64) as usize;
        if n == 0 {
            return 0;
        }
        let pos = (tail & (self.capacity - 1)) as usize;
        let first = n.min(self.capacity as usize - pos);
        unsafe {
            std::ptr::copy_nonoverlapping(src.as_ptr(), self.data.as_ptr().add(pos), first);
            if first < n {
                std::ptr::copy_nonoverlapping(src.as_ptr().add(first), self.data.as_ptr(), n - first);
            }
        }
        self.tail_atomic().store(tail + n as u64, Ordering::Release);
        n
    }

    /// Consumer side. Copies up to `dst.len()` bytes out in production order
    /// and publishes the new head. Zero means the ring is empty.
    pub fn read_into(&self, dst: &mut [u8]) -> usize {
        let head = self.head_atomic().load(Ordering::Relaxed);
        let tail = self.tail_atomic().load(Ordering::Acquire);
        let used = tail.wrapping_sub(head);
        self.check(used);
        let n = used.min(dst.len() as u64) as usize;
        if n == 0 {
            return 0;
        }
        let pos = (head & (self.capacity - 1)) as usize;
        let first = n.min(self.capacity as usize - pos);
        unsafe {
            std::ptr::copy_nonoverlapping(self.data.as_ptr().add(pos), dst.as_mut_ptr(), first);
            if first < n {
                std::ptr::copy_nonoverlapping(self.data.as_ptr(), dst.as_mut_ptr().add(first), n - first);
            }
        }
        self.head_atomic().store(head + n as u64, Ordering::Release);
        n
    }

    pub fn read(&self, max: u64) -> Vec<u8> {
        let avail = self.len().min(max) as usize;
        let mut out = vec![0u8; avail];
        let n = self.read_into(&mut out);
        out.truncate(n);
        out
    }
}

#[repr(C, align(64))]
struct AlignedLine([u64; 8]);

struct HeapBacking(std::cell::UnsafeCell<Box<[AlignedLine]>>);

// SAFETY: the buffer is only reached through `Ring`, which upholds SPSC.
unsafe impl Send for HeapBacking {}
unsafe impl Sync for HeapBacking {}

#[cfg(test)]
mod tests {
    use std::collections::VecDeque;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn fits() {
        let r = Ring::heap(8);
        assert_eq!(r.write(&[1, 2, 3, 4, 5]), 5);
        assert_eq!(r.len(), 5);
    }

    #[test]
    fn full_ring_writes_nothing() {
        let r = Ring::heap(8);
        assert_eq!(r.write(&[0; 8]), 8);
        assert_eq!(r.write(&[9]), 0);
        assert_eq!(r.tail() - r.head(), 8);
    }

    #[test]
    fn partial_write() {
        let r = Ring::heap(8);
        assert_eq!(r.write(&[0; 6]), 6);
        assert_eq!(r.write(&[1; 6]), 2);
    }

    #[test]
    fn fifo_order() {
        let r = Ring::heap(8);
        r.write(&[1, 2, 3]);
        assert_eq!(r.read(2), vec![1, 2]);
        assert_eq!(r.read(2), vec![3]);
        assert!(r.read(2).is_empty());
    }

    #[test]
    fn empty_read() {
        assert!(Ring::heap(16).read(4).is_empty());
    }

    #[test]
    fn wrap_around() {
        let r = Ring::heap(8);
        assert_eq!(r.write(&[0, 1, 2, 3, 4, 5]), 6);
        assert_eq!(r.read(6), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(r.write(&[10, 11, 12, 13, 14]), 5);
        // positions 6,7,0,1,2
        assert_eq!(r.read(8), vec![10, 11, 12, 13, 14]);
        assert_eq!(r.head(), 11);
        assert_eq!(r.tail(), 11);
    }

    #[test]
    fn randomized_fifo_matches_deque() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = Ring::heap(32);
        let mut oracle = VecDeque::new();
        let mut next = 0u8;
        for _ in 0..10_000 {
            if rng.random_bool(0.5) {
                let len = rng.random_range(0..48);
                let chunk: Vec<u8> = (0..len).map(|_| {
                    next = next.wrapping_add(1);
                    next
                }).collect();
                let n = r.write(&chunk);
                assert_eq!(n, chunk.len().min(32 - oracle.len()));
                oracle.extend(&chunk[..n]);
                // unwritten suffix is retried as fresh bytes later
                next = next.wrapping_sub((chunk.len() - n) as u8);
            } else {
                let max = rng.random_range(0..48);
                let got = r.read(max);
                let want: Vec<u8> = oracle.drain(..got.len()).collect();
                assert_eq!(got, want);
                assert_eq!(got.len(), (max as usize).min(got.len() + oracle.len()));
            }
            assert!(r.tail() - r.head() <= 32);
            assert_eq!(r.len() as usize, oracle.len());
        }
    }

    #[test]
    fn two_threads_preserve_stream() {
        let r = Ring::heap(64);
        let total = 200_000usize;
        let producer = {
            let r = r.clone();
            std::thread::spawn(move || {
                let data: Vec<u8> = (0..total).map(|i| (i * 31 % 251) as u8).collect();
                let mut off = 0;
                while off < total {
                    let end = (off + 37).min(total);
                    let n = r.write(&data[off..end]);
                    off += n;
                    if n == 0 {
                        std::thread::yield_now();
                    }
                }
            })
        };
        let mut got = Vec::with_capacity(total);
        let mut buf = [0u8; 53];
        while got.len() < total {
            let n = r.read_into(&mut buf);
            got.extend_from_slice(&buf[..n]);
            if n == 0 {
                std::thread::yield_now();
            }
        }
        producer.join().unwrap();
        assert!(got.iter().enumerate().all(|(i, b)| *b == (i * 31 % 251) as u8));
    }
}
