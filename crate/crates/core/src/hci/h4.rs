//! H4 (UART) packet framing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::consts::{H4_ACL, H4_COMMAND, H4_EVENT, H4_SCO};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum H4Packet {
    Command { opcode: u16, params: Vec<u8> },
    Acl { handle: u16, flags: u8, data: Vec<u8> },
    Sco { handle: u16, data: Vec<u8> },
    Event { code: u8, params: Vec<u8> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum FramingError {
    #[error("unknown H4 packet type 0x{ty:02x} at offset {offset}")]
    BadType { offset: usize, ty: u8 },
    #[error("truncated H4 packet at offset {offset}")]
    Truncated { offset: usize },
    #[error("H4 packet at offset {offset} exceeds its length field limit")]
    TooLong { offset: usize },
}

impl H4Packet {
    pub fn command(opcode: u16, params: &[u8]) -> Self {
        H4Packet::Command { opcode, params: params.to_vec() }
    }

    pub fn event(code: u8, params: &[u8]) -> Self {
        H4Packet::Event { code, params: params.to_vec() }
    }

    pub fn type_byte(&self) -> u8 {
        match self {
            H4Packet::Command { .. } => H4_COMMAND,
            H4Packet::Acl { .. } => H4_ACL,
            H4Packet::Sco { .. } => H4_SCO,
            H4Packet::Event { .. } => H4_EVENT,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, FramingError> {
        let mut v = vec![self.type_byte()];
        match self {
            H4Packet::Command { opcode, params } => {
                let n = u8::try_from(params.len()).map_err(|_| FramingError::TooLong { offset: 0 })?;
                v.extend_from_slice(&opcode.to_le_bytes());
                v.push(n);
                v.extend_from_slice(params);
            }
            H4Packet::Acl { handle, flags, data } => {
                let n = u16::try_from(data.len()).map_err(|_| FramingError::TooLong { offset: 0 })?;
                v.extend_from_slice(&((handle & 0x0fff) | ((*flags as u16 & 0x0f) << 12)).to_le_bytes());
                v.extend_from_slice(&n.to_le_bytes());
                v.extend_from_slice(data);
            }
            H4Packet::Sco { handle, data } => {
                let n = u8::try_from(data.len()).map_err(|_| FramingError::TooLong { offset: 0 })?;
                v.extend_from_slice(&(handle & 0x0fff).to_le_bytes());
                v.push(n);
                v.extend_from_slice(data);
            }
            H4Packet::Event { code, params } => {
                let n = u8::try_from(params.len()).map_err(|_| FramingError::TooLong { offset: 0 })?;
                v.push(*code);
                v.push(n);
                v.extend_from_slice(params);
            }
        }
        Ok(v)
    }

    /// Decodes one packet from the start of `buf`; returns it with its
    /// encoded length.
    pub fn decode(buf: &[u8]) -> Result<(H4Packet, usize), FramingError> {
        decode_at(buf, 0)
    }
}

fn decode_at(buf: &[u8], offset: usize) -> Result<(H4Packet, usize), FramingError> {
    let b = &buf[offset..];
    let truncated = FramingError::Truncated { offset };
    let ty = *b.first().ok_or(truncated)?;
    let (hlen, body) = match ty {
        H4_COMMAND | H4_SCO => (3, *b.get(3).ok_or(truncated)? as usize),
        H4_EVENT => (2, *b.get(2).ok_or(truncated)? as usize),
        H4_ACL => (4, u16::from_le_bytes([*b.get(3).ok_or(truncated)?, *b.get(4).ok_or(truncated)?]) as usize),
        _ => return Err(FramingError::BadType { offset, ty }),
    };
    let total = 1 + hlen + body;
    if b.len() < total {
        return Err(truncated);
    }
    let payload = b[1 + hlen..total].to_vec();
    let p = match ty {
        H4_COMMAND => H4Packet::Command { opcode: u16::from_le_bytes([b[1], b[2]]), params: payload },
        H4_SCO => H4Packet::Sco { handle: u16::from_le_bytes([b[1], b[2]]) & 0x0fff, data: payload },
        H4_EVENT => H4Packet::Event { code: b[1], params: payload },
        _ => {
            let h = u16::from_le_bytes([b[1], b[2]]);
            H4Packet::Acl { handle: h & 0x0fff, flags: (h >> 12) as u8, data: payload }
        }
    };
    Ok((p, total))
}

/// Decodes a complete stream. Every byte must belong to a packet.
pub fn decode_stream(buf: &[u8]) -> Result<Vec<H4Packet>, FramingError> {
    let mut out = Vec::new();
    let mut off = 0;
    while off < buf.len() {
        let (p, n) = decode_at(buf, off)?;
        out.push(p);
        off += n;
    }
    Ok(out)
}

/// Incremental decoder for a byte stream that arrives in pieces.
#[derive(Debug, Clone, Default)]
pub struct H4Decoder {
    buf: Vec<u8>,
    consumed: usize,
}

impl H4Decoder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends bytes and returns every packet completed by them.
    pub fn push(&mut self, bytes: &[u8]) -> Result<Vec<H4Packet>, FramingError> {
        self.buf.extend_from_slice(bytes);
        let mut out = Vec::new();
        let mut off = 0;
        loop {
            match decode_at(&self.buf, off) {
                Ok((p, n)) => {
                    out.push(p);
                    off += n;
                }
                Err(FramingError::Truncated { .. }) => break,
                Err(FramingError::BadType { ty, .. }) => {
                    let at = self.consumed + off;
                    self.buf.drain(..off);
                    self.consumed += off;
                    return Err(FramingError::BadType { offset: at, ty });
                }
                Err(e) => return Err(e),
            }
        }
        self.buf.drain(..off);
        self.consumed += off;
        Ok(out)
    }

    pub fn pending(&self) -> usize {
        self.buf.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn packet() -> impl Strategy<Value = H4Packet> {
        prop_oneof![
            (any::<u16>(), prop::collection::vec(any::<u8>(), 0..255)).prop_map(|(o, p)| H4Packet::command(o, &p)),
            (0u16..0x1000, 0u8..16, prop::collection::vec(any::<u8>(), 0..1100))
                .prop_map(|(handle, flags, data)| H4Packet::Acl { handle, flags, data }),
            (0u16..0x1000, prop::collection::vec(any::<u8>(), 0..255))
                .prop_map(|(handle, data)| H4Packet::Sco { handle, data }),
            (any::<u8>(), prop::collection::vec(any::<u8>(), 0..255)).prop_map(|(c, p)| H4Packet::event(c, &p)),
        ]
    }

    proptest! {
        #[test]
        fn round_trip(ps in prop::collection::vec(packet(), 0..8), split in 0usize..4000) {
            let mut bytes = Vec::new();
            for p in &ps {
                bytes.extend(p.encode().unwrap());
            }
            prop_assert_eq!(&decode_stream(&bytes).unwrap(), &ps);
            let cut = split.min(bytes.len());
            let mut d = H4Decoder::new();
            let mut got = d.push(&bytes[..cut]).unwrap();
            got.extend(d.push(&bytes[cut..]).unwrap());
            prop_assert_eq!(got, ps);
            prop_assert_eq!(d.pending(), 0);
        }
    }

    #[test]
    fn framing_errors_carry_offsets() {
        let mut bytes = H4Packet::event(0x0e, &[1, 2]).encode().unwrap();
        let n = bytes.len();
        bytes.push(0x09);
        assert_eq!(decode_stream(&bytes), Err(FramingError::BadType { offset: n, ty: 0x09 }));
        assert_eq!(decode_stream(&bytes[..n - 1]), Err(FramingError::Truncated { offset: 0 }));
        assert!(H4Packet::command(1, &[0; 256]).encode().is_err());
    }
}
