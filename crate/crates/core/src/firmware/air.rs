//! Over-the-air packet builders.

use serde::{Deserialize, Serialize};

use super::{pkt_log, Task};
use crate::modem::crc::{crc24, Crc24State};
use crate::modem::AirPacket;

/// CRC init used on advertising channels.
pub const ADV_CRC_INIT: u32 = 0x555555;

/// Classic payload header: LLID (2 bits), flow (1), length (10), RFU (3).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PayloadHeader {
    pub llid: u8,
    pub flow: bool,
    pub length: u16,
    pub rfu: u8,
}

impl PayloadHeader {
    pub fn new(llid: u8, length: u16) -> Self {
        PayloadHeader { llid, flow: true, length, rfu: 0 }
    }

    pub fn to_u16(self) -> u16 {
        (self.llid as u16 & 3)
            | ((self.flow as u16) << 2)
            | ((self.length & 0x3ff) << 3)
            | ((self.rfu as u16 & 7) << 13)
    }

    pub fn from_u16(h: u16) -> Self {
        PayloadHeader { llid: (h & 3) as u8, flow: h & 4 != 0, length: (h >> 3) & 0x3ff, rfu: (h >> 13) as u8 }
    }

    /// Copy length when the RFU bits are read as the top of the length field.
    pub fn effective_length(self, rfu_bug: bool) -> u32 {
        if rfu_bug {
            self.length as u32 | ((self.rfu as u32) << 10)
        } else {
            self.length as u32
        }
    }
}

fn padded(body: &[u8], len: usize) -> Vec<u8> {
    let mut v = body.to_vec();
    if v.len() < len {
        v.resize(len, 0);
    }
    v
}

/// Extended inquiry response seen by the inquiry task.
pub fn eir(header: PayloadHeader, body: &[u8]) -> AirPacket {
    AirPacket {
        pkt_log: pkt_log(Task::Inquiry, 0),
        header: header.to_u16(),
        body: padded(body, header.length as usize),
    }
}

/// LMP PDU on a classic link.
pub fn lmp(link: u8, pdu: &[u8]) -> AirPacket {
    let h = PayloadHeader::new(3, pdu.len().min(0x3ff) as u16);
    AirPacket { pkt_log: pkt_log(Task::Acl, link), header: h.to_u16(), body: pdu.to_vec() }
}

/// ACL data on a classic link (`llid` 1 or 2 for user data).
pub fn acl(link: u8, llid: u8, data: &[u8]) -> AirPacket {
    let h = PayloadHeader::new(llid, data.len().min(0x3ff) as u16);
    AirPacket { pkt_log: pkt_log(Task::Acl, link), header: h.to_u16(), body: data.to_vec() }
}

/// BLE data-channel PDU followed by its CRC.
pub fn ble(crc_init: u32, llid: u8, pdu: &[u8]) -> AirPacket {
    let len = pdu.len().min(255);
    let b0 = llid & 3;
    let mut msg = vec![b0, len as u8];
    msg.extend_from_slice(&pdu[..len]);
    let crc = crc24(Crc24State::new(crc_init), &msg);
    let mut body = pdu[..len].to_vec();
    body.extend_from_slice(&crc);
    AirPacket { pkt_log: pkt_log(Task::LeConn, 0), header: b0 as u16 | ((len as u16) << 8), body }
}

/// BLE data PDU with a caller-chosen CRC.
pub fn ble_with_crc(llid: u8, pdu: &[u8], crc: [u8; 3]) -> AirPacket {
    let len = pdu.len().min(255);
    let mut body = pdu[..len].to_vec();
    body.extend_from_slice(&crc);
    AirPacket { pkt_log: pkt_log(Task::LeConn, 0), header: (llid & 3) as u16 | ((len as u16) << 8), body }
}

/// Advertising PDU (`pdu_type` in the low nibble of the first header byte).
pub fn adv(pdu_type: u8, pdu: &[u8]) -> AirPacket {
    let len = pdu.len().min(255);
    AirPacket {
        pkt_log: pkt_log(Task::Advertising, 0),
        header: (pdu_type & 0x0f) as u16 | ((len as u16) << 8),
        body: pdu[..len].to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_round_trip() {
        let h = PayloadHeader { llid: 2, flow: false, length: 0x3ff, rfu: 5 };
        assert_eq!(PayloadHeader::from_u16(h.to_u16()), h);
        assert_eq!(h.effective_length(false), 0x3ff);
        assert_eq!(h.effective_length(true), 0x3ff | 5 << 10);
    }

    #[test]
    fn ble_packet_carries_crc() {
        let p = ble(0x123456, 2, &[1, 2, 3]);
        assert_eq!(p.body.len(), 6);
        assert_eq!(p.header >> 8, 3);
    }
}
