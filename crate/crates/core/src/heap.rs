//! Fixed-chunk block pools living inside guest RAM.
//!
//! Each chunk is a 4-byte next-free header followed by `size` payload bytes.
//! Free chunks form a singly linked list threaded through their headers; the
//! list head sits in the pool descriptor. The allocator trusts the list
//! completely, exactly like the original, so any overwrite of a free header is
//! followed blindly. [`BlocPool::sanitize`] is the only place that checks.
//!
//! Descriptor layout at `pool_addr`:
//!
//! | offset | field       |
//! |--------|-------------|
//! | +0     | block_start |
//! | +4     | capacity    |
//! | +8     | size        |
//! | +12    | free_head   |

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{AddressSpace, LayoutError, MemError};

pub const HEADER_LEN: u32 = 4;
pub const DESCRIPTOR_LEN: u32 = 16;

const OFF_BLOCK_START: u32 = 0;
const OFF_CAPACITY: u32 = 4;
const OFF_SIZE: u32 = 8;
const OFF_FREE_HEAD: u32 = 12;

/// Trailer used by the canary variant: saved LR word plus one static byte.
pub const CANARY_TRAILER_LEN: u32 = 5;
pub const CANARY_BYTE: u8 = 0xa5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocMode {
    OrDie,
    OrNull,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    OnCopy,
    OnRelease,
    OnAlloc,
    Explicit,
}

impl fmt::Display for Trigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Trigger::OnCopy => "on_copy",
            Trigger::OnRelease => "on_release",
            Trigger::OnAlloc => "on_alloc",
            Trigger::Explicit => "explicit",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HeapError {
    #[error("pool error: {0}")]
    Pool(String),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("pool 0x{pool_addr:08x} exhausted in or_die allocation")]
    Exhausted { pool_addr: u32 },
    #[error("heap canary violated for chunk 0x{payload:08x} (saved lr 0x{lr:08x})")]
    Canary { payload: u32, lr: u32 },
    #[error(transparent)]
    Fault(#[from] MemError),
}

/// Heap-corruption verdict. Fields echo the descriptor at detection time.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SanitizerReport {
    pub pool_addr: u32,
    pub block_start: u32,
    pub capacity: u32,
    pub size: u32,
    pub free_chunk: u32,
    pub step: u32,
    pub trigger: Trigger,
}

impl fmt::Display for SanitizerReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Heap Corruption Detected")?;
        writeln!(f, "pool = 0x{:x}", self.pool_addr)?;
        writeln!(f, "pool->block_start = 0x{:x}", self.block_start)?;
        writeln!(f, "pool->capacity = 0x{:02x}", self.capacity)?;
        writeln!(f, "pool->size = 0x{:04x}", self.size)?;
        write!(f, "free_chunk = 0x{:x}", self.free_chunk)
    }
}

/// Result of [`BlocPool::www_scenario`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteRecord {
    pub target: u32,
    pub overwritten_header: u32,
    pub first_alloc: u32,
    pub second_alloc: u32,
    pub payload: Vec<u8>,
    /// Bytes read back from `target` after the write.
    pub landed: Vec<u8>,
}

impl WriteRecord {
    pub fn confirmed(&self) -> bool {
        self.second_alloc == self.target && self.landed == self.payload
    }
}

/// Handle to a pool whose state lives in guest memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlocPool {
    pub pool_addr: u32,
    pub block_start: u32,
    pub size: u32,
    pub capacity: u32,
    pub canary: bool,
}

struct Descriptor {
    block_start: u32,
    capacity: u32,
    size: u32,
    free_head: u32,
}

impl BlocPool {
    /// Writes a descriptor at `pool_addr` and threads all chunks in ascending
    /// order, the last one terminated by 0.
    pub fn create(
        space: &mut AddressSpace,
        pool_addr: u32,
        block_start: u32,
        size: u32,
        capacity: u32,
    ) -> Result<BlocPool, HeapError> {
        if capacity == 0 {
            return Err(HeapError::Pool("capacity must be at least 1".into()));
        }
        if size == 0 {
            return Err(HeapError::Pool("chunk size must be at least 1".into()));
        }
        let span = capacity as u64 * (size as u64 + HEADER_LEN as u64);
        if !space.is_writable_ram(block_start, span) {
            return Err(LayoutError::NotRam { base: block_start, len: span }.into());
        }
        if !space.is_writable_ram(pool_addr, DESCRIPTOR_LEN as u64) {
            return Err(LayoutError::NotRam { base: pool_addr, len: DESCRIPTOR_LEN as u64 }.into());
        }
        let pool = BlocPool { pool_addr, block_start, size, capacity, canary: false };
        for i in 0..capacity {
            let next = if i + 1 < capacity { pool.chunk_header(i + 1) } else { 0 };
            space.write_u32(pool.chunk_header(i), next)?;
        }
        space.write_u32(pool_addr + OFF_BLOCK_START, block_start)?;
        space.write_u32(pool_addr + OFF_CAPACITY, capacity)?;
        space.write_u32(pool_addr + OFF_SIZE, size)?;
        space.write_u32(pool_addr + OFF_FREE_HEAD, block_start)?;
        Ok(pool)
    }

    pub fn with_canary(mut self, on: bool) -> Self {
        self.canary = on;
        self
    }

    pub fn stride(&self) -> u32 {
        self.size + HEADER_LEN
    }

    pub fn chunk_header(&self, i: u32) -> u32 {
        self.block_start + i * self.stride()
    }

    pub fn end(&self) -> u32 {
        self.block_start + self.capacity * self.stride()
    }

    /// Index of the chunk whose payload starts at `payload`, if any.
    pub fn chunk_index(&self, payload: u32) -> Option<u32> {
        let hdr = payload.checked_sub(HEADER_LEN)?;
        if hdr < self.block_start || hdr >= self.end() {
            return None;
        }
        let off = hdr - self.block_start;
        off.is_multiple_of(self.stride()).then_some(off / self.stride())
    }

    pub fn contains(&self, addr: u32) -> bool {
        addr >= self.block_start && addr < self.end()
    }

    pub fn free_head(&self, space: &AddressSpace) -> Result<u32, MemError> {
        space.read_u32(self.pool_addr + OFF_FREE_HEAD)
    }

    /// Pops the free-list head and returns its payload address.
    pub fn allocate(&self, space: &mut AddressSpace, mode: AllocMode) -> Result<Option<u32>, HeapError> {
        self.allocate_tagged(space, mode, 0)
    }

    /// Like [`allocate`](Self::allocate); `lr` is stored in the canary trailer
    /// when the canary variant is enabled.
    pub fn allocate_tagged(
        &self,
        space: &mut AddressSpace,
        mode: AllocMode,
        lr: u32,
    ) -> Result<Option<u32>, HeapError> {
        let head = self.free_head(space)?;
        if head == 0 {
            return match mode {
                AllocMode::OrNull => Ok(None),
                AllocMode::OrDie => Err(HeapError::Exhausted { pool_addr: self.pool_addr }),
            };
        }
        let next = space.read_u32(head)?;
        space.write_u32(self.pool_addr + OFF_FREE_HEAD, next)?;
        let payload = head.wrapping_add(HEADER_LEN);
        if self.canary {
            let trailer = payload + self.size - CANARY_TRAILER_LEN;
            let mut t = [0u8; CANARY_TRAILER_LEN as usize];
            t[..4].copy_from_slice(&lr.to_le_bytes());
            t[4] = CANARY_BYTE;
            space.write_bytes(trailer, &t)?;
        }
        Ok(Some(payload))
    }

    /// Pushes the chunk at `payload - 4` onto the free list. No validity check.
    pub fn release(&self, space: &mut AddressSpace, payload: u32) -> Result<(), HeapError> {
        let hdr = payload.wrapping_sub(HEADER_LEN);
        if self.canary && self.chunk_index(payload).is_some() {
            let trailer = payload + self.size - CANARY_TRAILER_LEN;
            let t = space.read_bytes(trailer, CANARY_TRAILER_LEN as usize)?;
            if t[4] != CANARY_BYTE {
                let lr = u32::from_le_bytes([t[0], t[1], t[2], t[3]]);
                return Err(HeapError::Canary { payload, lr });
            }
        }
        let head = self.free_head(space)?;
        space.write_u32(hdr, head)?;
        space.write_u32(self.pool_addr + OFF_FREE_HEAD, hdr)?;
        Ok(())
    }

    /// Number of entries on the free list, following pointers without validation.
    /// Stops after `capacity + 1` steps or on a fault.
    pub fn free_count(&self, space: &AddressSpace) -> u32 {
        let mut n = 0;
        let mut e = match self.free_head(space) {
            Ok(h) => h,
            Err(_) => return 0,
        };
        while e != 0 && n <= self.capacity {
            n += 1;
            e = match space.read_u32(e) {
                Ok(v) => v,
                Err(_) => break,
            };
        }
        n
    }

    /// Walks the free list and reports the first entry that is out of range
    /// or misaligned, or a walk longer than `capacity` entries.
    pub fn sanitize(&self, space: &AddressSpace, trigger: Trigger) -> Result<(), SanitizerReport> {
        self.sanitize_with(space.word_reader(), trigger)
    }

    /// [`sanitize`](Self::sanitize) over an arbitrary word reader.
    pub fn sanitize_with(
        &self,
        read_u32: impl Fn(u32) -> Result<u32, MemError>,
        trigger: Trigger,
    ) -> Result<(), SanitizerReport> {
        let fail = |free_chunk: u32| SanitizerReport {
            pool_addr: self.pool_addr,
            block_start: self.block_start,
            capacity: self.capacity,
            size: self.size,
            free_chunk,
            step: 0,
            trigger,
        };
        let word = |off: u32| read_u32(self.pool_addr + off).map_err(|e| fail(e.addr()));
        let d = Descriptor {
            block_start: word(OFF_BLOCK_START)?,
            capacity: word(OFF_CAPACITY)?,
            size: word(OFF_SIZE)?,
            free_head: word(OFF_FREE_HEAD)?,
        };
        let report = |free_chunk: u32, step: u32| SanitizerReport {
            pool_addr: self.pool_addr,
            block_start: d.block_start,
            capacity: d.capacity,
            size: d.size,
            free_chunk,
            step,
            trigger,
        };
        let stride = d.size.wrapping_add(HEADER_LEN) as u64;
        let end = d.block_start as u64 + d.capacity as u64 * stride;
        let mut e = d.free_head;
        let mut step = 0u32;
        while e != 0 {
            if step > d.capacity {
                return Err(report(e, step));
            }
            let ok_range = e >= d.block_start && (e as u64) < end;
            let ok_align = stride != 0 && ((e - d.block_start.min(e)) as u64).is_multiple_of(stride);
            if !ok_range || !ok_align {
                return Err(report(e, step));
            }
            e = match read_u32(e) {
                Ok(v) => v,
                Err(_) => return Err(report(e, step)),
            };
            step += 1;
        }
        Ok(())
    }

    /// Simulates the write-what-where primitive: an overflow plants
    /// `target - 4` in the head free chunk's header, the next allocation
    /// consumes the head, and the one after returns `target`.
    pub fn www_scenario(
        &self,
        space: &mut AddressSpace,
        target: u32,
        payload: &[u8],
    ) -> Result<WriteRecord, HeapError> {
        if self.free_count(space) < 2 {
            return Err(HeapError::Pool("write-what-where needs at least 2 free chunks".into()));
        }
        let planted = target.wrapping_sub(HEADER_LEN);
        if target < HEADER_LEN || !space.is_writable_ram(planted, HEADER_LEN as u64) {
            return Err(MemError::WriteDenied(planted).into());
        }
        if !payload.is_empty() && !space.is_writable_ram(target, payload.len() as u64) {
            return Err(MemError::WriteDenied(target).into());
        }
        let head = self.free_head(space)?;
        space.write_u32(head, planted)?;
        let first = self.allocate(space, AllocMode::OrDie)?.expect("or_die returns a chunk");
        let second = self.allocate(space, AllocMode::OrDie)?.expect("or_die returns a chunk");
        space.write_bytes(second, payload)?;
        let landed = space.read_bytes(target, payload.len())?;
        Ok(WriteRecord {
            target,
            overwritten_header: head,
            first_alloc: first,
            second_alloc: second,
            payload: payload.to_vec(),
            landed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::Segment;
    use proptest::prelude::*;

    fn space() -> AddressSpace {
        AddressSpace::with_segments([Segment::ram("ram", 0x200000, 0x28000), Segment::ram("sram", 0x300000, 0x20000)])
            .unwrap()
    }

    fn ble_pool(s: &mut AddressSpace) -> BlocPool {
        BlocPool::create(s, 0x20d38c, 0x2232c0, 0x108, 0x0f).unwrap()
    }

    /// Independent free-list model: a stack of chunk indices.
    struct Model {
        free: Vec<u32>,
    }

    impl Model {
        fn new(cap: u32) -> Self {
            Model { free: (0..cap).rev().collect() }
        }
        fn alloc(&mut self) -> Option<u32> {
            self.free.pop()
        }
        fn release(&mut self, i: u32) {
            self.free.push(i);
        }
    }

    #[test]
    fn first_allocation_matches_trace() {
        let mut s = space();
        let p = ble_pool(&mut s);
        assert_eq!(p.allocate(&mut s, AllocMode::OrNull).unwrap(), Some(0x2232c4));
    }

    #[test]
    fn zero_capacity_rejected() {
        let mut s = space();
        assert!(matches!(BlocPool::create(&mut s, 0x20d38c, 0x2232c0, 0x108, 0), Err(HeapError::Pool(_))));
        assert!(matches!(
            BlocPool::create(&mut s, 0x20d38c, 0x227f00, 0x108, 0x0f),
            Err(HeapError::Layout(LayoutError::NotRam { .. }))
        ));
    }

    #[test]
    fn free_list_matches_closed_form() {
        let mut s = space();
        let p = ble_pool(&mut s);
        let mut e = p.free_head(&s).unwrap();
        for i in 0..p.capacity {
            assert_eq!(e, 0x2232c0 + i * (0x108 + 4));
            e = s.read_u32(e).unwrap();
        }
        assert_eq!(e, 0);
    }

    #[test]
    fn exhaustion() {
        let mut s = space();
        let p = ble_pool(&mut s);
        for _ in 0..p.capacity {
            assert!(p.allocate(&mut s, AllocMode::OrNull).unwrap().is_some());
        }
        assert_eq!(p.allocate(&mut s, AllocMode::OrNull).unwrap(), None);
        assert_eq!(p.allocate(&mut s, AllocMode::OrDie), Err(HeapError::Exhausted { pool_addr: 0x20d38c }));
    }

    #[test]
    fn release_order_is_lifo() {
        let mut s = space();
        let p = ble_pool(&mut s);
        let a = p.allocate(&mut s, AllocMode::OrDie).unwrap().unwrap();
        p.release(&mut s, a).unwrap();
        assert_eq!(p.free_head(&s).unwrap(), a - 4);
        let [a, b, c] = [(); 3].map(|_| p.allocate(&mut s, AllocMode::OrDie).unwrap().unwrap());
        for x in [a, b, c] {
            p.release(&mut s, x).unwrap();
        }
        let got: Vec<u32> = (0..3).map(|_| p.allocate(&mut s, AllocMode::OrDie).unwrap().unwrap()).collect();
        assert_eq!(got, vec![c, b, a]);
    }

    #[test]
    fn foreign_release_is_flagged() {
        let mut s = space();
        let p = ble_pool(&mut s);
        p.release(&mut s, 0x201004).unwrap();
        let r = p.sanitize(&s, Trigger::Explicit).unwrap_err();
        assert_eq!(r.free_chunk, 0x201000);
        assert_eq!(r.step, 0);
    }

    #[test]
    fn dump_matches_listing() {
        let mut s = space();
        let p = ble_pool(&mut s);
        assert!(p.sanitize(&s, Trigger::Explicit).is_ok());
        s.write_u32(0x20d38c + 12, 0xa09b9af8).unwrap();
        let r = p.sanitize(&s, Trigger::OnCopy).unwrap_err();
        assert_eq!(
            r.to_string(),
            "Heap Corruption Detected\npool = 0x20d38c\npool->block_start = 0x2232c0\n\
             pool->capacity = 0x0f\npool->size = 0x0108\nfree_chunk = 0xa09b9af8"
        );
    }

    #[test]
    fn misaligned_pointer_reported_at_its_step() {
        let mut s = space();
        let p = ble_pool(&mut s);
        s.write_u32(p.chunk_header(1), 0x2232c1).unwrap();
        let r = p.sanitize(&s, Trigger::Explicit).unwrap_err();
        assert_eq!((r.free_chunk, r.step), (0x2232c1, 2));
    }

    #[test]
    fn cycle_is_reported() {
        let mut s = space();
        let p = ble_pool(&mut s);
        s.write_u32(p.chunk_header(3), p.chunk_header(0)).unwrap();
        let r = p.sanitize(&s, Trigger::Explicit).unwrap_err();
        assert_eq!(r.step, p.capacity + 1);
    }

    #[test]
    fn www_lands_at_target() {
        let mut s = space();
        let p = ble_pool(&mut s);
        let rec = p.www_scenario(&mut s, 0x310000, b"AAAA").unwrap();
        assert_eq!(rec.second_alloc, 0x310000);
        assert_eq!(s.read_bytes(0x310000, 4).unwrap(), b"AAAA");
        assert!(rec.confirmed());
    }

    #[test]
    fn www_into_later_chunk_keeps_list_well_formed() {
        let mut s = space();
        let p = ble_pool(&mut s);
        let target = p.chunk_header(2) + 4;
        let rec = p.www_scenario(&mut s, target, &[0x41; 8]).unwrap();
        assert_eq!(rec.second_alloc, target);
        assert!(p.sanitize(&s, Trigger::Explicit).is_ok());
        assert_eq!(p.free_head(&s).unwrap(), p.chunk_header(3));
    }

    #[test]
    fn www_needs_two_free_chunks() {
        let mut s = space();
        let p = BlocPool::create(&mut s, 0x20d38c, 0x2232c0, 0x108, 1).unwrap();
        assert!(matches!(p.www_scenario(&mut s, 0x310000, b"AAAA"), Err(HeapError::Pool(_))));
        let p = ble_pool(&mut s);
        assert!(matches!(p.www_scenario(&mut s, 0x400000, b"AAAA"), Err(HeapError::Fault(_))));
    }

    #[test]
    fn canary_catches_trailer_overwrite() {
        let mut s = space();
        let p = ble_pool(&mut s).with_canary(true);
        let a = p.allocate_tagged(&mut s, AllocMode::OrDie, 0x5a0c1).unwrap().unwrap();
        let b = p.allocate_tagged(&mut s, AllocMode::OrDie, 0x5a0c1).unwrap().unwrap();
        p.release(&mut s, b).unwrap();
        s.write_bytes(a, &[0u8; 0x108]).unwrap();
        assert_eq!(p.release(&mut s, a), Err(HeapError::Canary { payload: a, lr: 0 }));
    }

    proptest! {
        #[test]
        fn matches_reference_model(ops in proptest::collection::vec((any::<bool>(), any::<u8>()), 1..400)) {
            let mut s = space();
            let p = BlocPool::create(&mut s, 0x20d35c, 0x21fa48, 0x30, 16).unwrap();
            let mut model = Model::new(16);
            let mut live: Vec<u32> = Vec::new();
            for (alloc, pick) in ops {
                if alloc || live.is_empty() {
                    let got = p.allocate(&mut s, AllocMode::OrNull).unwrap();
                    let want = model.alloc().map(|i| p.chunk_header(i) + 4);
                    prop_assert_eq!(got, want);
                    if let Some(a) = got { live.push(a); }
                } else {
                    let a = live.swap_remove(pick as usize % live.len());
                    p.release(&mut s, a).unwrap();
                    model.release(p.chunk_index(a).unwrap());
                }
                let want_head = model.free.last().map(|&i| p.chunk_header(i)).unwrap_or(0);
                prop_assert_eq!(p.free_head(&s).unwrap(), want_head);
                prop_assert!(p.sanitize(&s, Trigger::Explicit).is_ok());
            }
        }

        #[test]
        fn bad_header_overwrite_is_reported(idx in 0u32..0x0f, value in any::<u32>()) {
            let mut s = space();
            let p = ble_pool(&mut s);
            let in_range = value >= p.block_start && value < p.end();
            let aligned = in_range && (value - p.block_start).is_multiple_of(p.stride());
            prop_assume!(value != 0 && !aligned);
            s.write_u32(p.chunk_header(idx), value).unwrap();
            let r = p.sanitize(&s, Trigger::Explicit).unwrap_err();
            prop_assert_eq!(r.free_chunk, value);
            prop_assert_eq!(r.step, idx + 1);
        }

        #[test]
        fn www_returns_target(off in 0u32..0x1fff0) {
            let target = (0x300004 + off) & !3;
            let mut s = space();
            let p = ble_pool(&mut s);
            let rec = p.www_scenario(&mut s, target, &[1, 2, 3, 4]).unwrap();
            prop_assert_eq!(rec.second_alloc, target);
            prop_assert_eq!(s.read_bytes(target, 4).unwrap(), vec![1, 2, 3, 4]);
        }
    }
}
