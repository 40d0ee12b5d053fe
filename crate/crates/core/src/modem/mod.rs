//! Virtual modem: half-slot clock, `phy_status` phase machine and packet
//! injection through the DMA receive buffer.
//!
//! Every tick advances the Bluetooth clock by one. The low two bits of the
//! clock select the phase:
//!
//! | ticks mod 4 | flags                      | input consumed                       |
//! |-------------|----------------------------|--------------------------------------|
//! | 0b00        | `RX_HDR_DONE`              | 2-byte pkt_log + 2-byte payload hdr  |
//! | 0b01        | `RX_DONE \| SLOT_01_INT`   | 240 payload bytes                    |
//! | 0b10        | `TX_DONE`                  | none                                 |
//! | 0b11        | `SLOT_11_INT`              | none                                 |
//!
//! The receive payload is read only when the same slot pair delivered a
//! header, so input queued mid-pair waits for the next pair.

pub mod crc;

use std::collections::VecDeque;
use std::io::Read;

use bitflags::bitflags;
use rand::RngCore;

pub use crc::{crc24, solve_crc_adjust, AdjustSystem, Crc24, Crc24State, Crc8, LinearCrc, SolverError};

/// Payload bytes carried per receive slot.
pub const RX_CHUNK: usize = 240;
/// Bytes read at `RX_HDR_DONE`.
pub const RX_HEADER: usize = 4;
pub const FRAME_LEN: usize = RX_HEADER + RX_CHUNK;
/// Nominal tick duration in nanoseconds (312.5 us).
pub const TICK_NS: u64 = 312_500;

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
    pub struct PhyFlags: u8 {
        const RX_HDR_DONE = 1 << 0;
        const RX_DONE = 1 << 1;
        const TX_DONE = 1 << 2;
        const SLOT_01_INT = 1 << 3;
        const SLOT_11_INT = 1 << 4;
    }
}

/// Flags for a clock value. Depends on nothing but the low two bits.
pub fn phase_flags(ticks: u64) -> PhyFlags {
    match ticks & 3 {
        0 => PhyFlags::RX_HDR_DONE,
        1 => PhyFlags::RX_DONE | PhyFlags::SLOT_01_INT,
        2 => PhyFlags::TX_DONE,
        _ => PhyFlags::SLOT_11_INT,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BtClock {
    pub ticks: u64,
}

impl BtClock {
    /// Starts one tick before a slot-pair boundary so the first tick lands on
    /// `RX_HDR_DONE`.
    pub fn new() -> Self {
        BtClock { ticks: 3 }
    }

    pub fn at(ticks: u64) -> Self {
        BtClock { ticks }
    }

    pub fn advance(&mut self) -> u64 {
        self.ticks += 1;
        self.ticks
    }

    pub fn nanos(&self) -> u64 {
        self.ticks * TICK_NS
    }
}

impl Default for BtClock {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhyEvent {
    pub ticks: u64,
    pub flags: PhyFlags,
    pub pkt_log: u16,
    pub pkt_hdr_status: u16,
    /// Meaningful for `rx_len` bytes, set at `RX_DONE`.
    pub rx_payload: [u8; RX_CHUNK],
    pub rx_len: usize,
    /// A header was latched in this slot pair.
    pub rx_valid: bool,
}

impl PhyEvent {
    fn new() -> Self {
        PhyEvent {
            ticks: 0,
            flags: PhyFlags::empty(),
            pkt_log: 0,
            pkt_hdr_status: 0,
            rx_payload: [0; RX_CHUNK],
            rx_len: 0,
            rx_valid: false,
        }
    }

    pub fn payload(&self) -> &[u8] {
        &self.rx_payload[..self.rx_len]
    }
}

/// Raw modem input. `read` returning 0 for a non-empty buffer means the
/// source is exhausted.
pub trait ByteSource {
    fn read(&mut self, buf: &mut [u8]) -> usize;
}

/// Source over an owned byte vector.
#[derive(Debug, Clone, Default)]
pub struct SliceSource {
    data: Vec<u8>,
    pos: usize,
}

impl SliceSource {
    pub fn new(data: Vec<u8>) -> Self {
        SliceSource { data, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }
}

impl ByteSource for SliceSource {
    fn read(&mut self, buf: &mut [u8]) -> usize {
        let n = buf.len().min(self.remaining());
        buf[..n].copy_from_slice(&self.data[self.pos..self.pos + n]);
        self.pos += n;
        n
    }
}

/// Source over any reader (file, pipe). I/O errors count as exhaustion.
pub struct ReaderSource<R: Read>(pub R);

impl<R: Read> ByteSource for ReaderSource<R> {
    fn read(&mut self, buf: &mut [u8]) -> usize {
        let mut n = 0;
        while n < buf.len() {
            match self.0.read(&mut buf[n..]) {
                Ok(0) | Err(_) => break,
                Ok(k) => n += k,
            }
        }
        n
    }
}

/// Endless random input, the equivalent of piping a random device in.
pub struct RngSource<R: RngCore>(pub R);

impl<R: RngCore> ByteSource for RngSource<R> {
    fn read(&mut self, buf: &mut [u8]) -> usize {
        self.0.fill_bytes(buf);
        buf.len()
    }
}

/// One over-the-air packet as the radio delivers it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AirPacket {
    pub pkt_log: u16,
    pub header: u16,
    /// Bytes placed in the DMA buffer, split over `ceil(len / 240)` frames.
    pub body: Vec<u8>,
}

impl AirPacket {
    pub fn frames(&self) -> usize {
        self.body.len().div_ceil(RX_CHUNK).max(1)
    }

    /// Frame serialization: every frame repeats the 4 header bytes.
    pub fn write_frames(&self, out: &mut Vec<u8>) {
        for k in 0..self.frames() {
            out.extend_from_slice(&self.pkt_log.to_le_bytes());
            out.extend_from_slice(&self.header.to_le_bytes());
            let start = (k * RX_CHUNK).min(self.body.len());
            let end = ((k + 1) * RX_CHUNK).min(self.body.len());
            out.extend_from_slice(&self.body[start..end]);
            out.resize(out.len() + RX_CHUNK - (end - start), 0);
        }
    }
}

/// Queue of serialized frames fed to the modem.
#[derive(Debug, Clone, Default)]
pub struct Injector {
    queue: VecDeque<u8>,
}

impl Injector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, p: &AirPacket) {
        let mut v = Vec::with_capacity(p.frames() * FRAME_LEN);
        p.write_frames(&mut v);
        self.queue.extend(v);
    }

    pub fn push_raw(&mut self, bytes: &[u8]) {
        self.queue.extend(bytes.iter().copied());
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn clear(&mut self) {
        self.queue.clear();
    }
}

impl ByteSource for Injector {
    fn read(&mut self, buf: &mut [u8]) -> usize {
        let n = buf.len().min(self.queue.len());
        let (front, back) = self.queue.as_slices();
        let k = n.min(front.len());
        buf[..k].copy_from_slice(&front[..k]);
        buf[k..n].copy_from_slice(&back[..n - k]);
        self.queue.drain(..n);
        n
    }
}

/// Input ran dry at a header read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("modem input exhausted at tick {0}")]
pub struct Exhausted(pub u64);

#[derive(Debug, Clone)]
pub struct Modem {
    pub clock: BtClock,
    event: PhyEvent,
    header_latched: bool,
    /// When false, an empty source at a header read is not an error; the pair
    /// is simply idle. Used for live sessions.
    pub stop_on_exhaust: bool,
}

impl Default for Modem {
    fn default() -> Self {
        Self::new()
    }
}

impl Modem {
    pub fn new() -> Self {
        Modem { clock: BtClock::new(), event: PhyEvent::new(), header_latched: false, stop_on_exhaust: true }
    }

    pub fn event(&self) -> &PhyEvent {
        &self.event
    }

    /// Advances one tick and returns the resulting status.
    pub fn tick(&mut self, input: &mut dyn ByteSource) -> Result<&PhyEvent, Exhausted> {
        let t = self.clock.advance();
        let flags = phase_flags(t);
        let ev = &mut self.event;
        ev.ticks = t;
        ev.flags = flags;
        ev.rx_len = 0;
        if flags.contains(PhyFlags::RX_HDR_DONE) {
            let mut h = [0u8; RX_HEADER];
            let n = input.read(&mut h);
            if n == 0 {
                self.header_latched = false;
                ev.rx_valid = false;
                if self.stop_on_exhaust {
                    return Err(Exhausted(t));
                }
                return Ok(&self.event);
            }
            ev.pkt_log = u16::from_le_bytes([h[0], h[1]]);
            ev.pkt_hdr_status = u16::from_le_bytes([h[2], h[3]]);
            ev.rx_valid = true;
            self.header_latched = true;
        } else if flags.contains(PhyFlags::RX_DONE) {
            if self.header_latched {
                let n = input.read(&mut ev.rx_payload);
                ev.rx_payload[n..].fill(0);
                ev.rx_len = RX_CHUNK;
            } else {
                ev.rx_valid = false;
            }
            self.header_latched = false;
        }
        Ok(&self.event)
    }

    /// True while a header has been latched but its payload not yet read.
    pub fn mid_pair(&self) -> bool {
        self.header_latched
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn table_rows() {
        assert_eq!(phase_flags(4), PhyFlags::RX_HDR_DONE);
        assert_eq!(phase_flags(5), PhyFlags::RX_DONE | PhyFlags::SLOT_01_INT);
        assert_eq!(phase_flags(6), PhyFlags::TX_DONE);
        assert_eq!(phase_flags(7), PhyFlags::SLOT_11_INT);
    }

    #[test]
    fn first_tick_reads_header_then_payload() {
        let mut m = Modem::new();
        let mut inj = Injector::new();
        inj.push(&AirPacket { pkt_log: 0x0102, header: 0x0304, body: vec![9; 10] });
        let ev = m.tick(&mut inj).unwrap();
        assert_eq!((ev.ticks, ev.pkt_log, ev.pkt_hdr_status), (4, 0x0102, 0x0304));
        let ev = m.tick(&mut inj).unwrap();
        assert_eq!(ev.rx_len, 240);
        assert_eq!(&ev.payload()[..11], &[9, 9, 9, 9, 9, 9, 9, 9, 9, 9, 0]);
        assert!(inj.is_empty());
        m.tick(&mut inj).unwrap();
        m.tick(&mut inj).unwrap();
        assert_eq!(m.tick(&mut inj), Err(Exhausted(8)));
    }

    #[test]
    fn input_arriving_mid_pair_waits() {
        let mut m = Modem::new();
        let mut inj = Injector::new();
        m.stop_on_exhaust = false;
        m.tick(&mut inj).unwrap();
        m.tick(&mut inj).unwrap();
        m.tick(&mut inj).unwrap();
        inj.push(&AirPacket { pkt_log: 1, header: 2, body: vec![] });
        assert_eq!(m.tick(&mut inj).unwrap().flags, PhyFlags::SLOT_11_INT);
        assert_eq!(inj.len(), FRAME_LEN);
        let ev = m.tick(&mut inj).unwrap();
        assert!(ev.rx_valid && ev.flags == PhyFlags::RX_HDR_DONE);
    }

    #[test]
    fn multi_frame_serialization() {
        let p = AirPacket { pkt_log: 0, header: 0, body: (0..=255u8).collect() };
        assert_eq!(p.frames(), 2);
        let mut v = Vec::new();
        p.write_frames(&mut v);
        assert_eq!(v.len(), 2 * FRAME_LEN);
        assert_eq!(v[4], 0);
        assert_eq!(v[FRAME_LEN + 4], 240);
    }

    proptest! {
        #[test]
        fn flags_depend_only_on_low_bits(t in any::<u64>()) {
            prop_assert_eq!(phase_flags(t), phase_flags(t & 3));
        }
    }
}
