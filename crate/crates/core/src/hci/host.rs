//! Simulated host stack: answers controller events, holds the link-key
//! cache and applies the selected link-key release policy.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::consts::*;
use super::h4::{FramingError, H4Decoder, H4Packet};
use crate::firmware::Firmware;

/// When the host hands out a cached link key.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Countermeasure {
    /// Reply to every request for a known address.
    #[default]
    Off,
    /// Only reply while the host itself considers the connection active.
    ActiveOnly,
    /// Reply after a fixed delay.
    Delay { ns: u64 },
}

impl fmt::Display for Countermeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Countermeasure::Off => f.write_str("off"),
            Countermeasure::ActiveOnly => f.write_str("active_only"),
            Countermeasure::Delay { ns } => write!(f, "delay:{}ms", ns / 1_000_000),
        }
    }
}

impl FromStr for Countermeasure {
    type Err = String;

    /// `off`, `active_only`, or `delay:<ms>` (the `ms` suffix is optional).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(Countermeasure::Off),
            "active_only" | "active-only" => Ok(Countermeasure::ActiveOnly),
            _ => {
                let ms = s
                    .strip_prefix("delay:")
                    .map(|v| v.trim_end_matches("ms"))
                    .and_then(|v| v.parse::<u64>().ok())
                    .ok_or_else(|| format!("unknown countermeasure `{s}`"))?;
                Ok(Countermeasure::Delay { ns: ms * 1_000_000 })
            }
        }
    }
}

/// Something the host did in reaction to controller traffic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum HostAction {
    KeyReplied { addr: [u8; 6], delay_ns: u64 },
    KeyDenied { addr: [u8; 6], known: bool },
    Connected { addr: [u8; 6], handle: u16 },
    Disconnected { handle: u16 },
    CommandDone { opcode: u16, status: u8 },
}

/// Deterministic key for a paired address.
pub fn derive_link_key(addr: &[u8; 6]) -> [u8; 16] {
    let d = Sha256::new().chain_update(b"link-key").chain_update(addr).finalize();
    let mut k = [0u8; 16];
    k.copy_from_slice(&d[..16]);
    k
}

/// Digest of an event history: each event body (code, length, params) in
/// order.
pub fn history_digest(events: &[H4Packet]) -> [u8; 32] {
    let mut h = Sha256::new();
    for e in events {
        if let H4Packet::Event { code, params } = e {
            h.update([*code, params.len() as u8]);
            h.update(params);
        }
    }
    h.finalize().into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("no cached or upstream reply for this event history")]
pub struct CacheMiss;

/// Answers event histories the cache has not seen.
pub trait Responder {
    fn respond(&mut self, history: &[H4Packet]) -> Option<H4Packet>;
}

impl<F: FnMut(&[H4Packet]) -> Option<H4Packet>> Responder for F {
    fn respond(&mut self, history: &[H4Packet]) -> Option<H4Packet> {
        self(history)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ResponseCache {
    map: HashMap<[u8; 32], H4Packet>,
    pub hits: u64,
    pub misses: u64,
}

impl ResponseCache {
    pub fn get(&self, history: &[H4Packet]) -> Option<&H4Packet> {
        self.map.get(&history_digest(history))
    }

    pub fn insert(&mut self, history: &[H4Packet], reply: H4Packet) {
        self.map.insert(history_digest(history), reply);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn clear(&mut self) {
        self.map.clear();
    }
}

#[derive(Debug, Clone, Default)]
pub struct HostOracle {
    pub countermeasure: Countermeasure,
    keys: BTreeMap<[u8; 6], [u8; 16]>,
    active: BTreeSet<[u8; 6]>,
    handles: BTreeMap<u16, [u8; 6]>,
    decoder: H4Decoder,
    actions: Vec<HostAction>,
    events: Vec<H4Packet>,
    since_command: Vec<H4Packet>,
    pub cache: ResponseCache,
}

impl HostOracle {
    pub fn new(countermeasure: Countermeasure) -> Self {
        HostOracle { countermeasure, ..Default::default() }
    }

    /// Records a bonded device and returns its key.
    pub fn pair(&mut self, addr: [u8; 6]) -> [u8; 16] {
        let k = derive_link_key(&addr);
        self.keys.insert(addr, k);
        k
    }

    pub fn add_key(&mut self, addr: [u8; 6], key: [u8; 16]) {
        self.keys.insert(addr, key);
    }

    pub fn key(&self, addr: &[u8; 6]) -> Option<[u8; 16]> {
        self.keys.get(addr).copied()
    }

    pub fn is_active(&self, addr: &[u8; 6]) -> bool {
        self.active.contains(addr)
    }

    pub fn actions(&self) -> &[HostAction] {
        &self.actions
    }

    /// Every event received so far.
    pub fn events(&self) -> &[H4Packet] {
        &self.events
    }

    /// Events received since the host last sent a command.
    pub fn pending_events(&self) -> &[H4Packet] {
        &self.since_command
    }

    /// Cached reply for `history`, or `upstream`'s answer, which is then
    /// memoized. `upstream` is not consulted on a hit.
    pub fn respond(
        &mut self,
        history: &[H4Packet],
        upstream: Option<&mut dyn Responder>,
    ) -> Result<H4Packet, CacheMiss> {
        if let Some(r) = self.cache.get(history).cloned() {
            self.cache.hits += 1;
            return Ok(r);
        }
        self.cache.misses += 1;
        let reply = upstream.and_then(|u| u.respond(history)).ok_or(CacheMiss)?;
        self.cache.insert(history, reply.clone());
        Ok(reply)
    }

    /// Reaction to one controller packet: `(delay_ns, packet)` pairs.
    pub fn on_packet(&mut self, p: &H4Packet) -> Vec<(u64, H4Packet)> {
        let H4Packet::Event { code, params } = p else { return Vec::new() };
        self.events.push(p.clone());
        self.since_command.push(p.clone());
        let mut out = Vec::new();
        match *code {
            EV_LINK_KEY_REQUEST if params.len() >= 6 => {
                let mut addr = [0u8; 6];
                addr.copy_from_slice(&params[..6]);
                let key = self.keys.get(&addr).copied();
                let release = match (key, self.countermeasure) {
                    (None, _) => None,
                    (Some(_), Countermeasure::ActiveOnly) if !self.active.contains(&addr) => None,
                    (Some(k), Countermeasure::Delay { ns }) => Some((k, ns)),
                    (Some(k), _) => Some((k, 0)),
                };
                match release {
                    Some((k, delay_ns)) => {
                        let mut reply = addr.to_vec();
                        reply.extend_from_slice(&k);
                        out.push((delay_ns, H4Packet::command(OP_LINK_KEY_REQUEST_REPLY, &reply)));
                        self.actions.push(HostAction::KeyReplied { addr, delay_ns });
                    }
                    None => {
                        out.push((0, H4Packet::command(OP_LINK_KEY_REQUEST_NEG_REPLY, &addr)));
                        self.actions.push(HostAction::KeyDenied { addr, known: key.is_some() });
                    }
                }
            }
            EV_CONNECTION_COMPLETE if params.len() >= 9 && params[0] == STATUS_SUCCESS => {
                let handle = u16::from_le_bytes([params[1], params[2]]);
                let mut addr = [0u8; 6];
                addr.copy_from_slice(&params[3..9]);
                self.active.insert(addr);
                self.handles.insert(handle, addr);
                self.actions.push(HostAction::Connected { addr, handle });
            }
            EV_DISCONNECTION_COMPLETE if params.len() >= 3 => {
                let handle = u16::from_le_bytes([params[1], params[2]]);
                if let Some(a) = self.handles.remove(&handle) {
                    self.active.remove(&a);
                }
                self.actions.push(HostAction::Disconnected { handle });
            }
            EV_COMMAND_COMPLETE if params.len() >= 4 => {
                let opcode = u16::from_le_bytes([params[1], params[2]]);
                self.actions.push(HostAction::CommandDone { opcode, status: params[3] });
            }
            EV_COMMAND_STATUS if params.len() >= 4 => {
                let opcode = u16::from_le_bytes([params[2], params[3]]);
                self.actions.push(HostAction::CommandDone { opcode, status: params[0] });
            }
            _ => {}
        }
        out
    }

    /// Consumes a chunk of controller output.
    pub fn on_bytes(&mut self, bytes: &[u8]) -> Result<Vec<(u64, H4Packet)>, FramingError> {
        let packets = self.decoder.push(bytes)?;
        Ok(packets.iter().flat_map(|p| self.on_packet(p)).collect())
    }

    /// Drains the controller's output and schedules the host's answers on
    /// its UART. Returns the number of answers scheduled.
    pub fn service(&mut self, fw: &mut Firmware) -> Result<usize, FramingError> {
        let out = fw.take_hci_output();
        let replies = self.on_bytes(&out)?;
        let n = replies.len();
        if n > 0 {
            self.since_command.clear();
        }
        for (delay, p) in replies {
            let bytes = p.encode()?;
            if delay == 0 {
                fw.uart_rx(&bytes);
            } else {
                fw.schedule_uart_rx(delay, bytes);
            }
        }
        Ok(n)
    }
}

/// Host that issues a fixed command list, each after a delay.
#[derive(Debug, Clone, Default)]
pub struct ScriptedHost {
    pub steps: Vec<(u64, H4Packet)>,
}

impl ScriptedHost {
    pub fn new(steps: Vec<(u64, H4Packet)>) -> Self {
        ScriptedHost { steps }
    }

    /// Schedules every step on the controller UART.
    pub fn schedule(&self, fw: &mut Firmware) -> Result<(), FramingError> {
        for (delay, p) in &self.steps {
            fw.schedule_uart_rx(*delay, p.encode()?);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(addr: [u8; 6]) -> H4Packet {
        H4Packet::event(EV_LINK_KEY_REQUEST, &addr)
    }

    #[test]
    fn policy_table() {
        let a = [1, 2, 3, 4, 5, 6];
        let mut h = HostOracle::new(Countermeasure::Off);
        h.pair(a);
        assert_eq!(h.on_packet(&request(a))[0].1, {
            let mut r = a.to_vec();
            r.extend_from_slice(&derive_link_key(&a));
            H4Packet::command(OP_LINK_KEY_REQUEST_REPLY, &r)
        });

        h.countermeasure = Countermeasure::ActiveOnly;
        let r = h.on_packet(&request(a));
        assert_eq!(r[0].1, H4Packet::command(OP_LINK_KEY_REQUEST_NEG_REPLY, &a));
        let mut cc = vec![0, 0x0b, 0x00];
        cc.extend_from_slice(&a);
        cc.extend_from_slice(&[1, 0]);
        h.on_packet(&H4Packet::event(EV_CONNECTION_COMPLETE, &cc));
        assert!(matches!(h.on_packet(&request(a))[0].1, H4Packet::Command { opcode: OP_LINK_KEY_REQUEST_REPLY, .. }));

        h.countermeasure = Countermeasure::Delay { ns: 7_000_000 };
        assert_eq!(h.on_packet(&request(a))[0].0, 7_000_000);
    }

    #[test]
    fn cache_memoizes_upstream() {
        let mut h = HostOracle::new(Countermeasure::Off);
        let hist = vec![H4Packet::event(EV_COMMAND_COMPLETE, &[1, 3, 0x0c, 0])];
        let mut calls = 0;
        let mut up = |_: &[H4Packet]| {
            calls += 1;
            Some(H4Packet::command(OP_RESET, &[]))
        };
        for _ in 0..3 {
            assert_eq!(h.respond(&hist, Some(&mut up)), Ok(H4Packet::command(OP_RESET, &[])));
        }
        assert_eq!(calls, 1);
        assert_eq!((h.cache.hits, h.cache.misses), (2, 1));

        let other = vec![H4Packet::event(EV_COMMAND_COMPLETE, &[1, 3, 0x0c, 1])];
        assert_eq!(h.respond(&other, None), Err(CacheMiss));
        h.cache.clear();
        assert_eq!(h.respond(&hist, None), Err(CacheMiss));
    }

    #[test]
    fn digest_depends_on_order() {
        let a = H4Packet::event(1, &[1]);
        let b = H4Packet::event(1, &[2]);
        assert_ne!(history_digest(&[a.clone(), b.clone()]), history_digest(&[b, a]));
    }

    #[test]
    fn parse_countermeasure() {
        assert_eq!("off".parse(), Ok(Countermeasure::Off));
        assert_eq!("active_only".parse(), Ok(Countermeasure::ActiveOnly));
        assert_eq!("delay:20ms".parse(), Ok(Countermeasure::Delay { ns: 20_000_000 }));
        assert!("sometimes".parse::<Countermeasure>().is_err());
    }
}
