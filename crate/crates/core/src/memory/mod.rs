//! Segmented 32-bit guest address space.
//!
//! An [`AddressSpace`] is an ordered set of non-overlapping [`Segment`]s. ROM and
//! RAM segments carry backing bytes, MMIO segments dispatch to an optional
//! [`MmioHandler`]. Every access outside a segment, or against its permission,
//! returns a [`MemError`]; nothing is silently absorbed.
//!
//! RAM pages are tracked as dirty on write so a running instance can be rolled
//! back to a reference copy with [`AddressSpace::restore_from`] in time
//! proportional to the pages it touched.

mod snapshot;

pub use snapshot::{
    format_addr, load_snapshot, parse_addr, read_snapshot_dir, save_snapshot, write_snapshot_dir, ManifestSegment,
    SnapshotError, SnapshotManifest, MANIFEST_FILE,
};

use std::any::Any;
use std::cell::Cell;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Granularity of [`probe_map`] and of dirty tracking. Segment bases and
/// lengths must be multiples of it.
pub const PAGE_SIZE: u32 = 0x100;

const PAGE_SHIFT: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Perm {
    Read,
    Write,
    ReadWrite,
}

impl Perm {
    pub fn readable(self) -> bool {
        matches!(self, Perm::Read | Perm::ReadWrite)
    }

    pub fn writable(self) -> bool {
        matches!(self, Perm::Write | Perm::ReadWrite)
    }
}

impl fmt::Display for Perm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Perm::Read => "r-",
            Perm::Write => "-w",
            Perm::ReadWrite => "rw",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Rom,
    Ram,
    Mmio,
}

impl fmt::Display for SegmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SegmentKind::Rom => "rom",
            SegmentKind::Ram => "ram",
            SegmentKind::Mmio => "mmio",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub base: u32,
    pub length: u32,
    pub perm: Perm,
    pub kind: SegmentKind,
}

impl Segment {
    pub fn new(name: impl Into<String>, base: u32, length: u32, perm: Perm, kind: SegmentKind) -> Self {
        Segment { name: name.into(), base, length, perm, kind }
    }

    pub fn rom(name: impl Into<String>, base: u32, length: u32) -> Self {
        Self::new(name, base, length, Perm::Read, SegmentKind::Rom)
    }

    pub fn ram(name: impl Into<String>, base: u32, length: u32) -> Self {
        Self::new(name, base, length, Perm::ReadWrite, SegmentKind::Ram)
    }

    pub fn mmio(name: impl Into<String>, base: u32, length: u32) -> Self {
        Self::new(name, base, length, Perm::ReadWrite, SegmentKind::Mmio)
    }

    /// Exclusive end address as a 64-bit value (never wraps).
    pub fn end(&self) -> u64 {
        self.base as u64 + self.length as u64
    }

    pub fn contains(&self, addr: u32) -> bool {
        addr >= self.base && (addr as u64) < self.end()
    }

    fn validate(&self) -> Result<(), LayoutError> {
        if self.length == 0 {
            return Err(LayoutError::EmptySegment(self.name.clone()));
        }
        if self.end() > 1u64 << 32 {
            return Err(LayoutError::Wraps(self.name.clone()));
        }
        if !self.base.is_multiple_of(PAGE_SIZE) || !self.length.is_multiple_of(PAGE_SIZE) {
            return Err(LayoutError::Unaligned(self.name.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error("segment `{0}` has zero length")]
    EmptySegment(String),
    #[error("segment `{0}` wraps the 32-bit address space")]
    Wraps(String),
    #[error("segment `{0}` is not aligned to 0x100")]
    Unaligned(String),
    #[error("segment `{0}` overlaps segment `{1}`")]
    Overlap(String, String),
    #[error("duplicate segment name `{0}`")]
    DuplicateName(String),
    #[error("required segment `{0}` is missing")]
    Missing(String),
    #[error("region 0x{base:08x}+0x{len:x} is not contained in writable RAM")]
    NotRam { base: u32, len: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MemError {
    #[error("unmapped access at 0x{0:08x}")]
    Unmapped(u32),
    #[error("read of non-readable memory at 0x{0:08x}")]
    ReadDenied(u32),
    #[error("write of non-writable memory at 0x{0:08x}")]
    WriteDenied(u32),
}

impl MemError {
    pub fn addr(&self) -> u32 {
        match *self {
            MemError::Unmapped(a) | MemError::ReadDenied(a) | MemError::WriteDenied(a) => a,
        }
    }
}

/// Device model attached to an MMIO segment. Offsets are relative to the
/// segment base.
pub trait MmioHandler: Send + Sync {
    /// `None` means the register is not modeled.
    fn read(&mut self, offset: u32) -> Option<u8>;
    /// Returns `false` when the register is not modeled.
    fn write(&mut self, offset: u32, value: u8) -> bool;
    fn box_clone(&self) -> Box<dyn MmioHandler>;
    fn as_any(&self) -> &dyn Any;
}

impl Clone for Box<dyn MmioHandler> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

#[derive(Clone)]
enum Backing {
    Rom(Arc<Vec<u8>>),
    Ram { bytes: Vec<u8>, dirty: Vec<u64> },
    Mmio(Option<Box<dyn MmioHandler>>),
}

#[derive(Clone)]
struct Region {
    seg: Segment,
    backing: Backing,
}

impl Region {
    fn new(seg: Segment) -> Self {
        let len = seg.length as usize;
        let backing = match seg.kind {
            SegmentKind::Rom => Backing::Rom(Arc::new(vec![0; len])),
            SegmentKind::Ram => Backing::Ram { bytes: vec![0; len], dirty: vec![0; (len >> PAGE_SHIFT).div_ceil(64)] },
            SegmentKind::Mmio => Backing::Mmio(None),
        };
        Region { seg, backing }
    }
}

/// One contiguous mapped range reported by [`probe_map`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappedRange {
    pub base: u32,
    pub length: u64,
    pub perm: Perm,
    /// Number of declared segments folded into this range (1 when not coalesced).
    pub segments: usize,
}

#[derive(Clone, Default)]
pub struct AddressSpace {
    regions: Vec<Region>,
    rom_overlay: bool,
}

impl fmt::Debug for AddressSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.regions.iter().map(|r| &r.seg)).finish()
    }
}

impl AddressSpace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a space from a segment list; all backing bytes start zeroed.
    pub fn with_segments(segments: impl IntoIterator<Item = Segment>) -> Result<Self, LayoutError> {
        let mut space = Self::new();
        for seg in segments {
            space.add_segment(seg)?;
        }
        Ok(space)
    }

    pub fn add_segment(&mut self, seg: Segment) -> Result<(), LayoutError> {
        seg.validate()?;
        for r in &self.regions {
            if r.seg.name == seg.name {
                return Err(LayoutError::DuplicateName(seg.name));
            }
            if (seg.base as u64) < r.seg.end() && (r.seg.base as u64) < seg.end() {
                return Err(LayoutError::Overlap(seg.name, r.seg.name.clone()));
            }
        }
        let idx = self.regions.partition_point(|r| r.seg.base < seg.base);
        self.regions.insert(idx, Region::new(seg));
        Ok(())
    }

    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        self.regions.iter().map(|r| &r.seg)
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments().find(|s| s.name == name)
    }

    pub fn segment_at(&self, addr: u32) -> Option<&Segment> {
        self.find(addr).map(|i| &self.regions[i].seg)
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Attaches a device model to the named MMIO segment.
    pub fn attach_mmio(&mut self, name: &str, handler: Box<dyn MmioHandler>) -> Result<(), LayoutError> {
        let region = self
            .regions
            .iter_mut()
            .find(|r| r.seg.name == name && r.seg.kind == SegmentKind::Mmio)
            .ok_or_else(|| LayoutError::Missing(name.to_string()))?;
        region.backing = Backing::Mmio(Some(handler));
        Ok(())
    }

    /// Downcasts the device model attached to an MMIO segment.
    pub fn mmio_device<T: 'static>(&self, name: &str) -> Option<&T> {
        self.regions.iter().find(|r| r.seg.name == name).and_then(|r| match &r.backing {
            Backing::Mmio(Some(h)) => h.as_any().downcast_ref::<T>(),
            _ => None,
        })
    }

    /// While active, writes to ROM segments succeed (models a patch overlay).
    pub fn set_rom_overlay(&mut self, active: bool) {
        self.rom_overlay = active;
    }

    pub fn rom_overlay(&self) -> bool {
        self.rom_overlay
    }

    /// Replaces a ROM segment's contents. Length must match the segment.
    pub fn load_rom(&mut self, name: &str, bytes: Arc<Vec<u8>>) -> Result<(), LayoutError> {
        let region = self
            .regions
            .iter_mut()
            .find(|r| r.seg.name == name && r.seg.kind == SegmentKind::Rom)
            .ok_or_else(|| LayoutError::Missing(name.to_string()))?;
        if bytes.len() != region.seg.length as usize {
            return Err(LayoutError::NotRam { base: region.seg.base, len: bytes.len() as u64 });
        }
        region.backing = Backing::Rom(bytes);
        Ok(())
    }

    fn find(&self, addr: u32) -> Option<usize> {
        let idx = self.regions.partition_point(|r| r.seg.base <= addr);
        if idx == 0 {
            return None;
        }
        let i = idx - 1;
        self.regions[i].seg.contains(addr).then_some(i)
    }

    /// True if `[addr, addr+len)` is a single writable RAM range.
    pub fn is_writable_ram(&self, addr: u32, len: u64) -> bool {
        match self.find(addr) {
            Some(i) => {
                let seg = &self.regions[i].seg;
                seg.kind == SegmentKind::Ram && seg.perm.writable() && addr as u64 + len <= seg.end()
            }
            None => false,
        }
    }

    pub fn read_u8(&self, addr: u32) -> Result<u8, MemError> {
        let i = self.find(addr).ok_or(MemError::Unmapped(addr))?;
        let r = &self.regions[i];
        if !r.seg.perm.readable() {
            return Err(MemError::ReadDenied(addr));
        }
        let off = (addr - r.seg.base) as usize;
        Ok(match &r.backing {
            Backing::Rom(b) => b[off],
            Backing::Ram { bytes, .. } => bytes[off],
            Backing::Mmio(_) => {
                log::warn!("read of MMIO 0x{addr:08x} without mutable dispatch returns 0");
                0
            }
        })
    }

    /// Read that may dispatch into an MMIO device model.
    pub fn read_u8_mut(&mut self, addr: u32) -> Result<u8, MemError> {
        let i = self.find(addr).ok_or(MemError::Unmapped(addr))?;
        let r = &mut self.regions[i];
        if !r.seg.perm.readable() {
            return Err(MemError::ReadDenied(addr));
        }
        let off = addr - r.seg.base;
        Ok(match &mut r.backing {
            Backing::Rom(b) => b[off as usize],
            Backing::Ram { bytes, .. } => bytes[off as usize],
            Backing::Mmio(h) => match h.as_mut().and_then(|h| h.read(off)) {
                Some(v) => v,
                None => {
                    log::warn!("read of unmodeled MMIO register 0x{addr:08x} returns 0");
                    0
                }
            },
        })
    }

    pub fn write_u8(&mut self, addr: u32, value: u8) -> Result<(), MemError> {
        let i = self.find(addr).ok_or(MemError::Unmapped(addr))?;
        let overlay = self.rom_overlay;
        let r = &mut self.regions[i];
        let off = addr - r.seg.base;
        match &mut r.backing {
            Backing::Rom(b) => {
                if !overlay {
                    return Err(MemError::WriteDenied(addr));
                }
                Arc::make_mut(b)[off as usize] = value;
            }
            Backing::Ram { bytes, dirty } => {
                if !r.seg.perm.writable() {
                    return Err(MemError::WriteDenied(addr));
                }
                bytes[off as usize] = value;
                let page = (off >> PAGE_SHIFT) as usize;
                dirty[page / 64] |= 1 << (page % 64);
            }
            Backing::Mmio(h) => {
                if !r.seg.perm.writable() {
                    return Err(MemError::WriteDenied(addr));
                }
                let handled = h.as_mut().map(|h| h.write(off, value)).unwrap_or(false);
                if !handled {
                    log::warn!("write 0x{value:02x} to unmodeled MMIO register 0x{addr:08x} dropped");
                }
            }
        }
        Ok(())
    }

    /// Reads `buf.len()` bytes. Accesses within a single ROM/RAM segment take a
    /// bulk path, anything else is resolved byte by byte.
    pub fn read_into(&self, addr: u32, buf: &mut [u8]) -> Result<(), MemError> {
        if buf.is_empty() {
            return Ok(());
        }
        if let Some(i) = self.find(addr) {
            let r = &self.regions[i];
            let off = (addr - r.seg.base) as usize;
            if r.seg.perm.readable() && addr as u64 + buf.len() as u64 <= r.seg.end() {
                match &r.backing {
                    Backing::Rom(b) => {
                        buf.copy_from_slice(&b[off..off + buf.len()]);
                        return Ok(());
                    }
                    Backing::Ram { bytes, .. } => {
                        buf.copy_from_slice(&bytes[off..off + buf.len()]);
                        return Ok(());
                    }
                    Backing::Mmio(_) => {}
                }
            }
        }
        for (k, slot) in buf.iter_mut().enumerate() {
            let a = addr.checked_add(k as u32).ok_or(MemError::Unmapped(u32::MAX))?;
            *slot = self.read_u8(a)?;
        }
        Ok(())
    }

    pub fn read_bytes(&self, addr: u32, len: usize) -> Result<Vec<u8>, MemError> {
        let mut v = vec![0; len];
        self.read_into(addr, &mut v)?;
        Ok(v)
    }

    /// Writes `data`, faulting at the first byte that cannot be written. Bytes
    /// before the faulting one stay written, like a real overflowing copy.
    pub fn write_bytes(&mut self, addr: u32, data: &[u8]) -> Result<(), MemError> {
        if data.is_empty() {
            return Ok(());
        }
        if let Some(i) = self.find(addr) {
            let r = &mut self.regions[i];
            if r.seg.kind == SegmentKind::Ram && r.seg.perm.writable() && addr as u64 + data.len() as u64 <= r.seg.end()
            {
                if let Backing::Ram { bytes, dirty } = &mut r.backing {
                    let off = (addr - r.seg.base) as usize;
                    bytes[off..off + data.len()].copy_from_slice(data);
                    let first = off >> PAGE_SHIFT;
                    let last = (off + data.len() - 1) >> PAGE_SHIFT;
                    for page in first..=last {
                        dirty[page / 64] |= 1 << (page % 64);
                    }
                    return Ok(());
                }
            }
        }
        for (k, &b) in data.iter().enumerate() {
            let a = addr.checked_add(k as u32).ok_or(MemError::Unmapped(u32::MAX))?;
            self.write_u8(a, b)?;
        }
        Ok(())
    }

    pub fn read_u32(&self, addr: u32) -> Result<u32, MemError> {
        if let Some(i) = self.find(addr) {
            let r = &self.regions[i];
            let off = (addr - r.seg.base) as usize;
            let mem = match &r.backing {
                Backing::Rom(b) => Some(&b[..]),
                Backing::Ram { bytes, .. } => Some(&bytes[..]),
                Backing::Mmio(_) => None,
            };
            if let Some(w) = mem.filter(|_| r.seg.perm.readable()).and_then(|m| m.get(off..off + 4)) {
                return Ok(u32::from_le_bytes([w[0], w[1], w[2], w[3]]));
            }
        }
        let mut b = [0u8; 4];
        self.read_into(addr, &mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    /// Word reader that remembers the last plain-memory region it hit, for
    /// walks that stay inside one segment.
    pub fn word_reader(&self) -> impl Fn(u32) -> Result<u32, MemError> + '_ {
        let last: Cell<Option<(u32, &[u8])>> = Cell::new(None);
        move |addr| {
            if let Some((base, mem)) = last.get() {
                let off = addr.wrapping_sub(base) as usize;
                if let Some(w) = mem.get(off..off.wrapping_add(4)) {
                    return Ok(u32::from_le_bytes([w[0], w[1], w[2], w[3]]));
                }
            }
            if let Some(i) = self.find(addr) {
                let r = &self.regions[i];
                let mem = match &r.backing {
                    Backing::Rom(b) => Some(&b[..]),
                    Backing::Ram { bytes, .. } => Some(&bytes[..]),
                    Backing::Mmio(_) => None,
                };
                if let Some(m) = mem.filter(|_| r.seg.perm.readable()) {
                    last.set(Some((r.seg.base, m)));
                }
            }
            self.read_u32(addr)
        }
    }

    pub fn write_u32(&mut self, addr: u32, value: u32) -> Result<(), MemError> {
        self.write_bytes(addr, &value.to_le_bytes())
    }

    pub fn read_u16(&self, addr: u32) -> Result<u16, MemError> {
        let mut b = [0u8; 2];
        self.read_into(addr, &mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    pub fn write_u16(&mut self, addr: u32, value: u16) -> Result<(), MemError> {
        self.write_bytes(addr, &value.to_le_bytes())
    }

    /// Guest-side memcpy (forward, byte order preserved even when overlapping).
    pub fn copy(&mut self, dst: u32, src: u32, len: usize) -> Result<(), MemError> {
        let data = self.read_bytes(src, len)?;
        self.write_bytes(dst, &data)
    }

    /// Raw contents of a ROM or RAM segment.
    pub fn segment_bytes(&self, name: &str) -> Option<&[u8]> {
        self.regions.iter().find(|r| r.seg.name == name).and_then(|r| match &r.backing {
            Backing::Rom(b) => Some(b.as_slice()),
            Backing::Ram { bytes, .. } => Some(bytes.as_slice()),
            Backing::Mmio(_) => None,
        })
    }

    /// Shared handle to a ROM segment's bytes.
    pub fn rom_handle(&self, name: &str) -> Option<Arc<Vec<u8>>> {
        self.regions.iter().find(|r| r.seg.name == name).and_then(|r| match &r.backing {
            Backing::Rom(b) => Some(b.clone()),
            _ => None,
        })
    }

    fn fill(&mut self, name: &str, data: &[u8]) {
        if let Some(r) = self.regions.iter_mut().find(|r| r.seg.name == name) {
            match &mut r.backing {
                Backing::Rom(b) => *b = Arc::new(data.to_vec()),
                Backing::Ram { bytes, .. } => bytes.copy_from_slice(data),
                Backing::Mmio(_) => {}
            }
        }
    }

    /// Number of RAM pages written since the last [`restore_from`](Self::restore_from)
    /// or [`clear_dirty`](Self::clear_dirty).
    pub fn dirty_pages(&self) -> usize {
        self.regions
            .iter()
            .map(|r| match &r.backing {
                Backing::Ram { dirty, .. } => dirty.iter().map(|w| w.count_ones() as usize).sum(),
                _ => 0,
            })
            .sum()
    }

    pub fn clear_dirty(&mut self) {
        for r in &mut self.regions {
            if let Backing::Ram { dirty, .. } = &mut r.backing {
                dirty.iter_mut().for_each(|w| *w = 0);
            }
        }
    }

    /// True if both spaces declare exactly the same segments.
    pub fn same_layout(&self, other: &AddressSpace) -> bool {
        self.regions.len() == other.regions.len()
            && self.regions.iter().zip(&other.regions).all(|(a, b)| a.seg == b.seg)
    }

    /// Rolls this space back to `reference` by copying only dirty RAM pages.
    /// ROM is re-shared and MMIO device models are re-cloned. Falls back to a
    /// full clone when the layouts differ.
    pub fn restore_from(&mut self, reference: &AddressSpace) {
        if !self.same_layout(reference) {
            *self = reference.clone();
            return;
        }
        for (mine, theirs) in self.regions.iter_mut().zip(&reference.regions) {
            match (&mut mine.backing, &theirs.backing) {
                (Backing::Ram { bytes, dirty }, Backing::Ram { bytes: src, .. }) => {
                    for (w, word) in dirty.iter_mut().enumerate() {
                        let mut bits = *word;
                        while bits != 0 {
                            let page = w * 64 + bits.trailing_zeros() as usize;
                            let start = page << PAGE_SHIFT;
                            let end = (start + PAGE_SIZE as usize).min(bytes.len());
                            bytes[start..end].copy_from_slice(&src[start..end]);
                            bits &= bits - 1;
                        }
                        *word = 0;
                    }
                }
                (Backing::Rom(mine_rom), Backing::Rom(src)) => {
                    if !Arc::ptr_eq(mine_rom, src) {
                        *mine_rom = src.clone();
                    }
                }
                (mine_b, theirs_b) => *mine_b = theirs_b.clone(),
            }
        }
        self.rom_overlay = reference.rom_overlay;
    }

    /// Byte-exact equality of all ROM/RAM contents and layout.
    pub fn contents_eq(&self, other: &AddressSpace) -> bool {
        self.same_layout(other)
            && self.regions.iter().zip(&other.regions).all(|(a, b)| match (&a.backing, &b.backing) {
                (Backing::Rom(x), Backing::Rom(y)) => x == y,
                (Backing::Ram { bytes: x, .. }, Backing::Ram { bytes: y, .. }) => x == y,
                (Backing::Mmio(_), Backing::Mmio(_)) => true,
                _ => false,
            })
    }
}

/// Mapped ranges of `space`, ascending. Adjacent segments with equal
/// permission are coalesced into one range; [`MappedRange::segments`] records
/// how many declared segments each range covers.
pub fn probe_map(space: &AddressSpace) -> Vec<MappedRange> {
    let mut out: Vec<MappedRange> = Vec::new();
    for seg in space.segments() {
        if let Some(last) = out.last_mut() {
            if last.perm == seg.perm && last.base as u64 + last.length == seg.base as u64 {
                last.length += seg.length as u64;
                last.segments += 1;
                continue;
            }
        }
        out.push(MappedRange { base: seg.base, length: seg.length as u64, perm: seg.perm, segments: 1 });
    }
    out
}

/// Human-readable segment table used by `snapshot inspect`.
pub fn render_segment_table(space: &AddressSpace) -> String {
    let mut s = String::from("name             base        end         size      perm kind\n");
    for seg in space.segments() {
        s.push_str(&format!(
            "{:<16} 0x{:08x}  0x{:08x}  0x{:06x}  {:<4} {}\n",
            seg.name,
            seg.base,
            seg.end() - 1,
            seg.length,
            seg.perm,
            seg.kind
        ));
    }
    s
}
