//! Wi-Fi coexistence register block, modeled as a three-state abstraction of
//! the co-located Wi-Fi core.

use std::any::Any;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::layout::COEX_BASE;
use crate::memory::MmioHandler;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WifiState {
    #[default]
    Ok,
    Degraded,
    Panic,
}

impl fmt::Display for WifiState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WifiState::Ok => "ok",
            WifiState::Degraded => "degraded",
            WifiState::Panic => "panic",
        })
    }
}

/// Registers whose writes take the Wi-Fi core down.
pub const PANIC_REGS: [u32; 2] = [0x650200, 0x650400];

/// Observed per-device effects, kept as data for demos and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CoexPreset {
    pub chip: &'static str,
    pub device: &'static str,
    pub addrs: &'static [u32],
    /// `None` when any value triggers the effect.
    pub value: Option<u8>,
    pub effect: WifiState,
    pub note: &'static str,
}

pub const PRESETS: &[CoexPreset] = &[
    CoexPreset {
        chip: "BCM4335C0",
        device: "Nexus 5",
        addrs: &[0x650440, 0x650600],
        value: Some(0x00),
        effect: WifiState::Degraded,
        note: "Wi-Fi disconnects",
    },
    CoexPreset {
        chip: "BCM4345C1",
        device: "iPhone SE",
        addrs: &[0x650200],
        value: Some(0xff),
        effect: WifiState::Panic,
        note: "kernel panic",
    },
    CoexPreset {
        chip: "BCM4377B3",
        device: "MacBook Pro 2019",
        addrs: &[0x650400],
        value: None,
        effect: WifiState::Panic,
        note: "kernel panic",
    },
    CoexPreset {
        chip: "BCM4378B1",
        device: "iPhone 11",
        addrs: &[0x650400],
        value: None,
        effect: WifiState::Panic,
        note: "kernel panic",
    },
    CoexPreset {
        chip: "BCM4375B1",
        device: "Galaxy S10",
        addrs: &[0x650200],
        value: None,
        effect: WifiState::Panic,
        note: "Wi-Fi disabled until reboot",
    },
    CoexPreset {
        chip: "BCM4345C0",
        device: "Raspberry Pi 3+",
        addrs: &[],
        value: None,
        effect: WifiState::Degraded,
        note: "random writes anywhere in 0x650000-0x6507ff crash",
    },
];

pub fn preset(name: &str) -> Option<&'static CoexPreset> {
    PRESETS.iter().find(|p| p.chip.eq_ignore_ascii_case(name) || p.device.eq_ignore_ascii_case(name))
}

/// State transition for one register write. Panic is sticky.
pub fn next_state(cur: WifiState, addr: u32, _value: u8) -> WifiState {
    if PANIC_REGS.contains(&addr) {
        WifiState::Panic
    } else {
        cur.max(WifiState::Degraded)
    }
}

#[derive(Debug, Clone, Default)]
pub struct CoexDevice {
    pub state: WifiState,
    pub writes: u32,
    regs: Vec<(u32, u8)>,
}

impl CoexDevice {
    pub fn new(state: WifiState) -> Self {
        CoexDevice { state, writes: 0, regs: Vec::new() }
    }

    pub fn last_writes(&self) -> &[(u32, u8)] {
        &self.regs
    }
}

impl MmioHandler for CoexDevice {
    fn read(&mut self, offset: u32) -> Option<u8> {
        let addr = COEX_BASE + offset;
        Some(self.regs.iter().rev().find(|(a, _)| *a == addr).map_or(0, |(_, v)| *v))
    }

    fn write(&mut self, offset: u32, value: u8) -> bool {
        let addr = COEX_BASE + offset;
        self.state = next_state(self.state, addr, value);
        self.writes += 1;
        if self.regs.len() < 64 {
            self.regs.push((addr, value));
        }
        true
    }

    fn box_clone(&self) -> Box<dyn MmioHandler> {
        Box::new(self.clone())
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rows() {
        assert_eq!(next_state(WifiState::Ok, 0x650200, 0xff), WifiState::Panic);
        assert_eq!(next_state(WifiState::Ok, 0x650440, 0x00), WifiState::Degraded);
        assert_eq!(next_state(WifiState::Ok, 0x650600, 0x00), WifiState::Degraded);
        assert_eq!(next_state(WifiState::Ok, 0x650400, 0x00), WifiState::Panic);
        assert_eq!(next_state(WifiState::Panic, 0x650010, 0x42), WifiState::Panic);
    }

    #[test]
    fn presets_agree_with_transition() {
        for p in PRESETS {
            for &a in p.addrs {
                assert_eq!(next_state(WifiState::Ok, a, p.value.unwrap_or(0x5a)), p.effect, "{}", p.chip);
            }
        }
        assert!(preset("iphone se").is_some());
    }
}
