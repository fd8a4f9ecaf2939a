//! File-backed shared regions.
//!
//! Layout (bit-exact, see PROTOCOL.md):
//!
//! ```text
//! 0                 RegionHeader (64 bytes)
//! 64                slot area, bump-allocated by the backend in 64-byte steps
//! ring_area_offset  ring control block + ring data (absent when capacity 0)
//! ```

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::sync::atomic::{AtomicU64, Ordering};

use memmap2::MmapRaw;

use super::checksum::fnv1a64;
use super::ring::{RING_CTRL_BYTES, Ring};
use super::ShmemError;

pub const REGION_MAGIC: u64 = 0x4E58_5553_4D45_4D30;
pub const REGION_VERSION: u32 = 1;
pub const HEADER_BYTES: u64 = 64;
pub const PAGE_BYTES: u64 = 4096;
pub const SLOT_ALIGN: u64 = 64;
pub const DEFAULT_RING_CAPACITY: u64 = 4 * 1024 * 1024;
pub const DEFAULT_REGION_CAP: u64 = 256 * 1024 * 1024;

const OFF_MAGIC: usize = 0;
const OFF_VERSION: usize = 8;
const OFF_MODE: usize = 12;
const OFF_CURSOR: usize = 16;
const OFF_RING_OFFSET: usize = 24;
const OFF_RING_CAPACITY: usize = 32;
const OFF_REGION_ID: usize = 40;
const OFF_SIZE: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum RegionMode {
    Slot = 0,
    Ring = 1,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionDescriptor {
    pub region_id: u64,
    pub file_name: PathBuf,
    pub size_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionHeader {
    pub magic: u64,
    pub version: u32,
    pub mode: u32,
    pub alloc_cursor: u64,
    pub ring_area_offset: u64,
    pub ring_capacity: u64,
}

/// What to lay out in a new region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionLayout {
    pub mode: RegionMode,
    /// Slot-area bytes; ignored in RING mode.
    pub slot_bytes: u64,
    /// Zero means no ring.
    pub ring_capacity: u64,
}

impl RegionLayout {
    pub fn slot(slot_bytes: u64) -> Self {
        RegionLayout {
            mode: RegionMode::Slot,
            slot_bytes,
            ring_capacity: 0,
        }
    }

    pub fn ring(capacity: u64) -> Self {
        RegionLayout {
            mode: RegionMode::Ring,
            slot_bytes: 0,
            ring_capacity: capacity,
        }
    }

    pub fn with_ring(mut self, capacity: u64) -> Self {
        self.ring_capacity = capacity;
        self
    }

    fn slot_bytes(&self) -> u64 {
        match self.mode {
            RegionMode::Slot => self.slot_bytes,
            RegionMode::Ring => 0,
        }
    }

    pub fn ring_area_offset(&self) -> u64 {
        align_up(HEADER_BYTES + self.slot_bytes(), SLOT_ALIGN)
    }

    /// Total file size, rounded up to whole pages.
    pub fn total_bytes(&self) -> u64 {
        let end = if self.ring_capacity > 0 {
            self.ring_area_offset() + RING_CTRL_BYTES + self.ring_capacity
        } else {
            HEADER_BYTES + self.slot_bytes()
        };
        align_up(end, PAGE_BYTES)
    }
}

pub fn align_up(v: u64, to: u64) -> u64 {
    v.div_ceil(to) * to
}

/// A granted window in a region. `checksum` is FNV-1a-64 of the window's
/// contents once sealed, zero before.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotGrant {
    pub region_id: u64,
    pub offset: u64,
    pub length: u64,
    pub checksum: u64,
}

impl SlotGrant {
    pub fn end(&self) -> u64 {
        self.offset + self.length
    }
}

struct Mapping {
    map: MmapRaw,
    _file: File,
}

/// One mapping of a region file. The backend creates and owns the file; the
/// sandbox attaches to it. Both sides hold their own `Region`.
pub struct Region {
    desc: RegionDescriptor,
    mapping: Arc<Mapping>,
    ring_area_offset: u64,
    ring_capacity: u64,
    owner: bool,
    // Process-local instrumentation, not part of the shared layout.
    bytes_written: AtomicU64,
    peak_usage: AtomicU64,
}

impl std::fmt::Debug for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Region").field("desc", &self.desc).finish()
    }
}

/// Where regions live by default: memory-backed `/dev/shm` when the host
/// has it, the temporary directory otherwise.
pub fn default_region_root() -> PathBuf {
    let shm = Path::new("/dev/shm");
    if shm.is_dir() {
        shm.to_path_buf()
    } else {
        std::env::temp_dir()
    }
}

pub fn region_path(dir: &Path, region_id: u64) -> PathBuf {
    dir.join(format!("nexus-region-{region_id}"))
}

impl Region {
    /// Creates, sizes, maps, and initializes a region file.
    pub fn create(dir: &Path, region_id: u64, layout: RegionLayout, cap: u64) -> Result<Region, ShmemError> {
        if layout.ring_capacity > 0 && !layout.ring_capacity.is_power_of_two() {
            return Err(ShmemError::BadLayout("ring capacity must be a power of two"));
        }
        let size = layout.total_bytes();
        if size > cap {
            return Err(ShmemError::CapacityExceeded { requested: size, cap });
        }
        let path = region_path(dir, region_id);
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(&path)?;
        file.set_len(size)?;
        let map = MmapRaw::map_raw(&file)?;
        let ring_area_offset = if layout.ring_capacity > 0 {
            layout.ring_area_offset()
        } else {
            size
        };
        let region = Region {
            desc: RegionDescriptor {
                region_id,
                file_name: path,
                size_bytes: size,
            },
            mapping: Arc::new(Mapping { map, _file: file }),
            ring_area_offset,
            ring_capacity: layout.ring_capacity,
            owner: true,
            bytes_written: AtomicU64::new(0),
            peak_usage: AtomicU64::new(HEADER_BYTES),
        };
        unsafe {
            let base = region.base();
            std::ptr::write_unaligned(base.add(OFF_MAGIC) as *mut u64, REGION_MAGIC.to_le());
            std::ptr::write_unaligned(base.add(OFF_VERSION) as *mut u32, REGION_VERSION.to_le());
            std::ptr::write_unaligned(base.add(OFF_MODE) as *mut u32, (layout.mode as u32).to_le());
            std::ptr::write_unaligned(base.add(OFF_RING_OFFSET) as *mut u64, ring_area_offset.to_le());
            std::ptr::write_unaligned(base.add(OFF_RING_CAPACITY) as *mut u64, layout.ring_capacity.to_le());
            std::ptr::write_unaligned(base.add(OFF_REGION_ID) as *mut u64, region_id.to_le());
            std::ptr::write_unaligned(base.add(OFF_SIZE) as *mut u64, size.to_le());
            region.cursor().store(HEADER_BYTES, Ordering::Release);
            if layout.ring_capacity > 0 {
                Ring::init(base.add(ring_area_offset as usize), layout.ring_capacity);
            }
        }
        Ok(region)
    }

    /// Maps an existing region, validating magic and version first.
    pub fn attach(path: &Path) -> Result<Region, ShmemError> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .open(path)
            .map_err(|e| ShmemError::Attach(format!("{}: {e}", path.display())))?;
        let len = file.metadata()?.len();
        if len < HEADER_BYTES {
            return Err(ShmemError::Attach("region shorter than its header".into()));
        }
        let map = MmapRaw::map_raw(&file)?;
        let base = map.as_mut_ptr();
        let (magic, version, ring_area_offset, ring_capacity, region_id, size) = unsafe {
            (
                u64::from_le(std::ptr::read_unaligned(base.add(OFF_MAGIC) as *const u64)),
                u32::from_le(std::ptr::read_unaligned(base.add(OFF_VERSION) as *const u32)),
                u64::from_le(std::ptr::read_unaligned(base.add(OFF_RING_OFFSET) as *const u64)),
                u64::from_le(std::ptr::read_unaligned(base.add(OFF_RING_CAPACITY) as *const u64)),
                u64::from_le(std::ptr::read_unaligned(base.add(OFF_REGION_ID) as *const u64)),
                u64::from_le(std::ptr::read_unaligned(base.add(OFF_SIZE) as *const u64)),
            )
        };
        if magic != REGION_MAGIC {
            return Err(ShmemError::Attach(format!("bad magic 0x{magic:016x}")));
        }
        if version != REGION_VERSION {
            return Err(ShmemError::Attach(format!("unsupported version {version}")));
        }
        if size != len || (ring_capacity > 0 && ring_area_offset + RING_CTRL_BYTES + ring_capacity > len) {
            return Err(ShmemError::Attach("header does not match file size".into()));
        }
        if ring_capacity > 0 && (!ring_capacity.is_power_of_two() || ring_area_offset % SLOT_ALIGN != 0) {
            return Err(ShmemError::Attach("bad ring geometry".into()));
        }
        Ok(Region {
            desc: RegionDescriptor {
                region_id,
                file_name: path.to_path_buf(),
                size_bytes: len,
            },
            mapping: Arc::new(Mapping { map, _file: file }),
            ring_area_offset,
            ring_capacity,
            owner: false,
            bytes_written: AtomicU64::new(0),
            peak_usage: AtomicU64::new(HEADER_BYTES),
        })
    }

    fn base(&self) -> *mut u8 {
        self.mapping.map.as_mut_ptr()
    }

    fn cursor(&self) -> &AtomicU64 {
        unsafe { &*(self.base().add(OFF_CURSOR) as *const AtomicU64) }
    }

    pub fn descriptor(&self) -> &RegionDescriptor {
        &self.desc
    }

    pub fn id(&self) -> u64 {
        self.desc.region_id
    }

    pub fn size(&self) -> u64 {
        self.desc.size_bytes
    }

    pub fn header(&self) -> RegionHeader {
        unsafe {
            let base = self.base();
            RegionHeader {
                magic: u64::from_le(std::ptr::read_unaligned(base.add(OFF_MAGIC) as *const u64)),
                version: u32::from_le(std::ptr::read_unaligned(base.add(OFF_VERSION) as *const u32)),
                mode: u32::from_le(std::ptr::read_unaligned(base.add(OFF_MODE) as *const u32)),
                alloc_cursor: self.cursor().load(Ordering::Acquire),
                ring_area_offset: u64::from_le(std::ptr::read_unaligned(base.add(OFF_RING_OFFSET) as *const u64)),
                ring_capacity: u64::from_le(std::ptr::read_unaligned(base.add(OFF_RING_CAPACITY) as *const u64)),
            }
        }
    }

    /// End of the slot area.
    pub fn slot_limit(&self) -> u64 {
        self.ring_area_offset.min(self.desc.size_bytes)
    }

    pub fn slot_remaining(&self) -> u64 {
        self.slot_limit().saturating_sub(self.cursor().load(Ordering::Acquire))
    }

    /// Bump-allocates a 64-byte aligned window. Only the backend calls this.
    pub fn grant_slot(&self, length: u64) -> Result<SlotGrant, ShmemError> {
        let aligned = align_up(length, SLOT_ALIGN);
        let cursor = self.cursor();
        let mut cur = cursor.load(Ordering::Acquire);
        loop {
            if cur + aligned > self.slot_limit() {
                return Err(ShmemError::RegionFull {
                    requested: length,
                    remaining: self.slot_limit().saturating_sub(cur),
                });
            }
            match cursor.compare_exchange(cur, cur + aligned, Ordering::AcqRel, Ordering::Acquire) {
                Ok(_) => break,
                Err(seen) => cur = seen,
            }
        }
        self.observe_usage();
        Ok(SlotGrant {
            region_id: self.desc.region_id,
            offset: cur,
            length,
            checksum: 0,
        })
    }

    /// Returns the slot area to empty. Called between invocations, when no
    /// grant is live any more.
    pub fn reset(&self) {
        self.cursor().store(HEADER_BYTES, Ordering::Release);
    }

    fn check_window(&self, offset: u64, len: u64) -> Result<(), ShmemError> {
        if offset < HEADER_BYTES || offset.checked_add(len).is_none_or(|end| end > self.slot_limit()) {
            return Err(ShmemError::OutOfBounds { offset, len });
        }
        Ok(())
    }

    /// Read-only view of a window.
    ///
    /// The protocol guarantees nobody writes the window while the view is
    /// used: GET slots are filled before they are announced, PUT slots are
    /// read only after the frontend commits them.
    pub fn window(&self, offset: u64, len: u64) -> Result<&[u8], ShmemError> {
        self.check_window(offset, len)?;
        Ok(unsafe { std::slice::from_raw_parts(self.base().add(offset as usize), len as usize) })
    }

    /// Mutable view of a window held exclusively by the caller.
    ///
    /// # Safety
    /// The caller must own the window (a live grant nobody else touches) for
    /// the lifetime of the returned slice.
    #[allow(clippy::mut_from_ref)]
    pub unsafe fn window_mut(&self, offset: u64, len: u64) -> Result<&mut [u8], ShmemError> {
        self.check_window(offset, len)?;
        Ok(std::slice::from_raw_parts_mut(self.base().add(offset as usize), len as usize))
    }

    /// Copies `data` into the grant at `at` bytes from its start.
    pub fn fill(&self, grant: &SlotGrant, at: u64, data: &[u8]) -> Result<(), ShmemError> {
        if at + data.len() as u64 > grant.length {
            return Err(ShmemError::OutOfBounds {
                offset: grant.offset + at,
                len: data.len() as u64,
            });
        }
        let dst = unsafe { self.window_mut(grant.offset + at, data.len() as u64)? };
        dst.copy_from_slice(data);
        self.count_written(data.len() as u64);
        Ok(())
    }

    /// Records payload bytes written into slots by a direct writer (a socket
    /// read landing in a window obtained from `window_mut`).
    pub fn count_written(&self, n: u64) {
        self.bytes_written.fetch_add(n, Ordering::Relaxed);
    }

    pub fn bytes_written(&self) -> u64 {
        self.bytes_written.load(Ordering::Relaxed)
    }

    /// Computes and stores the grant's checksum.
    pub fn seal(&self, grant: SlotGrant) -> Result<SlotGrant, ShmemError> {
        let checksum = fnv1a64(self.window(grant.offset, grant.length)?);
        Ok(SlotGrant { checksum, ..grant })
    }

    pub fn verify_slot(&self, grant: &SlotGrant) -> bool {
        grant.region_id == self.desc.region_id
            && self
                .window(grant.offset, grant.length)
                .map(|w| fnv1a64(w) == grant.checksum)
                .unwrap_or(false)
    }

    pub fn ring(&self) -> Option<Ring> {
        if self.ring_capacity == 0 {
            return None;
        }
        let backing: Arc<dyn std::any::Any + Send + Sync> = self.mapping.clone();
        Some(unsafe {
            Ring::from_raw(
                self.base().add(self.ring_area_offset as usize),
                self.ring_capacity,
                backing,
            )
        })
    }

    pub fn ring_capacity(&self) -> u64 {
        self.ring_capacity
    }

    pub fn ring_area_offset(&self) -> u64 {
        self.ring_area_offset
    }

    /// Bytes in use: header plus allocated slots plus ring bytes in flight.
    pub fn usage(&self) -> u64 {
        let ring = self.ring().map(|r| r.len()).unwrap_or(0);
        self.cursor().load(Ordering::Acquire) + ring
    }

    pub fn observe_usage(&self) -> u64 {
        let u = self.usage();
        self.peak_usage.fetch_max(u, Ordering::Relaxed);
        u
    }

    pub fn peak_usage(&self) -> u64 {
        self.peak_usage.load(Ordering::Relaxed)
    }
}

// SAFETY: shared state is either atomic or handed out under the grant
// protocol documented on `window` / `window_mut`.
unsafe impl Send for Mapping {}
unsafe impl Sync for Mapping {}

impl Drop for Region {
    fn drop(&mut self) {
        if self.owner {
            let _ = std::fs::remove_file(&self.desc.file_name);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn page_rounding() {
        let d = dir();
        let r = Region::create(d.path(), 1, RegionLayout::slot(1 << 20), DEFAULT_REGION_CAP).unwrap();
        assert_eq!(r.size(), 1_052_672);
        assert_eq!(std::fs::metadata(&r.descriptor().file_name).unwrap().len(), 1_052_672);
        assert_eq!(r.descriptor().file_name, d.path().join("nexus-region-1"));
        let h = r.header();
        assert_eq!(h.magic, REGION_MAGIC);
        assert_eq!(h.version, REGION_VERSION);
        assert_eq!(h.mode, RegionMode::Slot as u32);
        assert_eq!(h.alloc_cursor, 64);
    }

    #[test]
    fn zero_size_hint_gives_one_page() {
        let d = dir();
        let r = Region::create(d.path(), 2, RegionLayout::slot(0), DEFAULT_REGION_CAP).unwrap();
        assert_eq!(r.size(), 4096);
        let g = r.grant_slot(0).unwrap();
        assert_eq!((g.offset, g.length), (64, 0));
        assert!(r.verify_slot(&r.seal(g).unwrap()));
    }

    #[test]
    fn cap_enforced() {
        let d = dir();
        let err = Region::create(d.path(), 3, RegionLayout::slot(256 << 20), DEFAULT_REGION_CAP).unwrap_err();
        assert!(matches!(err, ShmemError::CapacityExceeded { .. }));
    }

    #[test]
    fn grant_arithmetic() {
        let d = dir();
        let r = Region::create(d.path(), 4, RegionLayout::slot(4096), DEFAULT_REGION_CAP).unwrap();
        let a = r.grant_slot(100).unwrap();
        let b = r.grant_slot(100).unwrap();
        assert_eq!((a.offset, a.length), (64, 100));
        assert_eq!(b.offset, 64 + 128);
        assert_eq!(r.header().alloc_cursor, 64 + 256);
        // slot area ends at 4096 + 64, page rounded to 8192
        let rest = r.slot_remaining();
        assert!(matches!(r.grant_slot(rest + 1), Err(ShmemError::RegionFull { .. })));
        assert!(r.grant_slot(rest).is_ok());
        r.reset();
        assert_eq!(r.grant_slot(1).unwrap().offset, 64);
    }

    #[test]
    fn ring_layout() {
        let d = dir();
        let r = Region::create(d.path(), 5, RegionLayout::ring(1 << 12), DEFAULT_REGION_CAP).unwrap();
        let h = r.header();
        assert_eq!(h.mode, RegionMode::Ring as u32);
        assert_eq!(h.ring_area_offset, 64);
        assert_eq!(h.ring_capacity, 4096);
        assert_eq!(r.slot_remaining(), 0);
        assert_eq!(r.size(), 8192);
        let ring = r.ring().unwrap();
        assert_eq!(ring.write(&[1, 2, 3]), 3);
        let other = Region::attach(&r.descriptor().file_name).unwrap();
        assert_eq!(other.ring().unwrap().read(8), vec![1, 2, 3]);
    }

    #[test]
    fn slot_region_with_ring() {
        let d = dir();
        let layout = RegionLayout::slot(100).with_ring(1024);
        let r = Region::create(d.path(), 6, layout, DEFAULT_REGION_CAP).unwrap();
        assert_eq!(r.ring_area_offset(), 192);
        assert_eq!(r.slot_limit(), 192);
        assert!(r.grant_slot(128).is_ok());
        assert!(r.grant_slot(1).is_err());
    }

    #[test]
    fn checksum_detects_tamper() {
        let d = dir();
        let r = Region::create(d.path(), 7, RegionLayout::slot(1024), DEFAULT_REGION_CAP).unwrap();
        let g = r.grant_slot(300).unwrap();
        let data: Vec<u8> = (0..300u32).map(|i| i as u8).collect();
        r.fill(&g, 0, &data).unwrap();
        assert_eq!(r.bytes_written(), 300);
        let g = r.seal(g).unwrap();
        assert!(r.verify_slot(&g));
        unsafe { r.window_mut(g.offset + 17, 1).unwrap()[0] ^= 0x01 };
        assert!(!r.verify_slot(&g));
    }

    #[test]
    fn attach_sees_writes_and_rejects_bad_magic() {
        let d = dir();
        let r = Region::create(d.path(), 8, RegionLayout::slot(1024), DEFAULT_REGION_CAP).unwrap();
        let g = r.grant_slot(4).unwrap();
        r.fill(&g, 0, b"abcd").unwrap();
        let peer = Region::attach(&r.descriptor().file_name).unwrap();
        assert_eq!(peer.window(g.offset, 4).unwrap(), b"abcd");
        assert_eq!(peer.header().alloc_cursor, 128);
        // corrupt the magic through a raw file write
        use std::io::{Seek, SeekFrom, Write};
        let mut f = OpenOptions::new().write(true).open(&r.descriptor().file_name).unwrap();
        f.seek(SeekFrom::Start(0)).unwrap();
        f.write_all(&[0xFF]).unwrap();
        drop(f);
        assert!(matches!(Region::attach(&r.descriptor().file_name), Err(ShmemError::Attach(_))));
    }

    #[test]
    fn file_removed_with_owner() {
        let d = dir();
        let path = {
            let r = Region::create(d.path(), 9, RegionLayout::slot(10), DEFAULT_REGION_CAP).unwrap();
            r.descriptor().file_name.clone()
        };
        assert!(!path.exists());
    }

    #[test]
    fn window_bounds() {
        let d = dir();
        let r = Region::create(d.path(), 10, RegionLayout::slot(128), DEFAULT_REGION_CAP).unwrap();
        assert!(r.window(0, 8).is_err());
        assert!(r.window(64, r.slot_limit()).is_err());
        assert!(r.window(64, 128).is_ok());
    }
}
