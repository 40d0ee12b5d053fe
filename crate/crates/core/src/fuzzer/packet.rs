//! Injectable packets and packet sequences.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::firmware::{air, pkt_log, PayloadHeader, Task};
use crate::modem::AirPacket;

/// Longest payload a packet may carry.
pub const MAX_PAYLOAD: usize = 1021;
/// Longest sequence the mutators build.
pub const MAX_PACKETS: usize = 32;
/// Length of the all-zero seed packet: the longest LMP PDU.
pub const SEED_LEN: usize = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PacketKind {
    Eir,
    BlePdu,
    Acl,
    Lmp,
    Raw,
}

impl PacketKind {
    pub const ALL: [PacketKind; 5] =
        [PacketKind::Eir, PacketKind::BlePdu, PacketKind::Acl, PacketKind::Lmp, PacketKind::Raw];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<PacketKind> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            PacketKind::Eir => "eir",
            PacketKind::BlePdu => "ble_pdu",
            PacketKind::Acl => "acl",
            PacketKind::Lmp => "lmp",
            PacketKind::Raw => "raw",
        }
    }
}

impl fmt::Display for PacketKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PacketKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s || (s == "ble" && *k == PacketKind::BlePdu))
            .ok_or_else(|| format!("unknown packet kind `{s}`"))
    }
}

/// One injectable packet. `header` is kind-specific and may be empty, in
/// which case a well-formed header is derived from the payload:
///
/// * `eir`: 2 bytes, the little-endian payload header
/// * `ble_pdu`, `acl`: 1 byte, the LLID
/// * `lmp`: 1 byte, the link index
/// * `raw`: 4 bytes, packet log word then header word
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Packet {
    pub kind: PacketKind,
    pub header: Vec<u8>,
    pub payload: Vec<u8>,
}

impl Packet {
    pub fn new(kind: PacketKind, payload: impl Into<Vec<u8>>) -> Self {
        Packet { kind, header: Vec::new(), payload: payload.into() }
    }

    pub fn with_header(kind: PacketKind, header: impl Into<Vec<u8>>, payload: impl Into<Vec<u8>>) -> Self {
        Packet { kind, header: header.into(), payload: payload.into() }
    }

    /// `SEED_LEN` zero bytes.
    pub fn null(kind: PacketKind) -> Self {
        Packet::new(kind, vec![0u8; SEED_LEN])
    }

    /// Radio frames for this packet. `crc_init` is the LE connection's CRC
    /// seed so data PDUs pass the CRC check.
    pub fn to_air(&self, crc_init: u32) -> AirPacket {
        let payload = &self.payload[..self.payload.len().min(MAX_PAYLOAD)];
        let h = |i: usize, d: u8| self.header.get(i).copied().unwrap_or(d);
        match self.kind {
            PacketKind::Eir => {
                let header = if self.header.len() >= 2 {
                    PayloadHeader::from_u16(u16::from_le_bytes([self.header[0], self.header[1]]))
                } else {
                    PayloadHeader::new(2, payload.len() as u16)
                };
                air::eir(header, payload)
            }
            PacketKind::BlePdu => air::ble(crc_init, h(0, 2), payload),
            PacketKind::Acl => air::acl(0, h(0, 2), payload),
            PacketKind::Lmp => air::lmp(h(0, 0) & 7, payload),
            PacketKind::Raw => {
                let (log, header) = if self.header.len() >= 4 {
                    (
                        u16::from_le_bytes([self.header[0], self.header[1]]),
                        u16::from_le_bytes([self.header[2], self.header[3]]),
                    )
                } else {
                    (pkt_log(Task::Acl, 0), PayloadHeader::new(2, payload.len() as u16).to_u16())
                };
                AirPacket { pkt_log: log, header, body: payload.to_vec() }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationKind {
    Seed,
    Flip,
    Insert,
    Delete,
    Duplicate,
    Retype,
    Reorder,
    InsertKnown,
    Merge,
}

impl MutationKind {
    pub fn is_sequence_op(self) -> bool {
        matches!(self, MutationKind::Reorder | MutationKind::InsertKnown | MutationKind::Merge)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    /// Population indices the candidate was derived from.
    pub parents: Vec<u32>,
    pub mutation: MutationKind,
}

impl Lineage {
    pub fn seed() -> Self {
        Lineage { parents: Vec::new(), mutation: MutationKind::Seed }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketSequence {
    pub packets: Vec<Packet>,
    pub lineage: Lineage,
}

impl PacketSequence {
    pub fn new(packets: Vec<Packet>) -> Self {
        PacketSequence { packets, lineage: Lineage::seed() }
    }

    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    /// Total payload bytes.
    pub fn bytes(&self) -> usize {
        self.packets.iter().map(|p| p.payload.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_headers() {
        let p = Packet::new(PacketKind::Lmp, vec![0x66]).to_air(0);
        assert_eq!(p.pkt_log, pkt_log(Task::Acl, 0));
        assert_eq!(PayloadHeader::from_u16(p.header).length, 1);
        assert_eq!(PayloadHeader::from_u16(p.header).llid, 3);

        let e = Packet::new(PacketKind::Eir, vec![1; 20]).to_air(0);
        assert_eq!(e.body.len(), 20);
        assert_eq!(PayloadHeader::from_u16(e.header).length, 20);

        let b = Packet::new(PacketKind::BlePdu, vec![0; 300]).to_air(0x1234);
        assert_eq!(b.body.len(), 255 + 3);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in PacketKind::ALL {
            assert_eq!(k.name().parse::<PacketKind>(), Ok(k));
            assert_eq!(PacketKind::from_id(k.id()), Some(k));
        }
        assert!("wifi".parse::<PacketKind>().is_err());
    }
}
