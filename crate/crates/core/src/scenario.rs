//! Scripted end-to-end scenarios. Each one drives a fresh firmware instance
//! through a known flow and checks its success condition.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::firmware::layout::{lmp_byte0, LMP_AU_RAND};
use crate::firmware::{air, layout, Firmware, FirmwareProfile, FwError, PayloadHeader, ResetKind, WifiState};
use crate::hci::consts::OP_RESET;
use crate::hci::{Countermeasure, H4Packet, HostOracle};
use crate::heap::SanitizerReport;
use crate::hooks::Halt;
use crate::modem::crc::{crc24, solve_crc_adjust, Crc24State};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Demo {
    Eir,
    BlePdu,
    Acl,
    Www,
    LinkKey,
    Coex,
    Brick,
    SoftReset,
}

impl Demo {
    pub const ALL: [Demo; 8] =
        [Demo::Eir, Demo::BlePdu, Demo::Acl, Demo::Www, Demo::LinkKey, Demo::Coex, Demo::Brick, Demo::SoftReset];

    pub fn name(self) -> &'static str {
        match self {
            Demo::Eir => "eir",
            Demo::BlePdu => "ble_pdu",
            Demo::Acl => "acl",
            Demo::Www => "www",
            Demo::LinkKey => "linkkey",
            Demo::Coex => "coex",
            Demo::Brick => "brick",
            Demo::SoftReset => "softreset",
        }
    }
}

impl fmt::Display for Demo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Demo {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.into_iter().find(|d| d.name() == s).ok_or_else(|| format!("unknown demo `{s}`"))
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Firmware(#[from] FwError),
    #[error("check failed: {0}")]
    Check(String),
}

impl From<Halt> for ScenarioError {
    fn from(h: Halt) -> Self {
        ScenarioError::Firmware(FwError::Halt(h))
    }
}

/// Narration of one run plus the sanitizer report, if the scenario ends in
/// one.
#[derive(Debug, Clone, Default)]
pub struct Transcript {
    pub lines: Vec<String>,
    pub report: Option<SanitizerReport>,
}

impl Transcript {
    fn say(&mut self, line: impl Into<String>) {
        self.lines.push(line.into());
    }
}

fn check(cond: bool, what: impl Into<String>) -> Result<(), ScenarioError> {
    if cond {
        Ok(())
    } else {
        Err(ScenarioError::Check(what.into()))
    }
}

const SEED: u64 = 1;
/// Word the overflow demos plant in the next chunk header.
pub const PLANTED: u32 = 0xdead_beef;
/// Target of the write-what-where demo.
pub const WWW_TARGET: u32 = 0x310000;

/// Runs `demo`, appending to `out`. On failure `out` keeps the lines
/// produced so far.
pub fn run(demo: Demo, out: &mut Transcript) -> Result<(), ScenarioError> {
    match demo {
        Demo::Eir => eir(out),
        Demo::BlePdu => ble_pdu(out),
        Demo::Acl => acl(out),
        Demo::Www => www(out),
        Demo::LinkKey => link_key(out),
        Demo::Coex => coex(out),
        Demo::Brick => brick(out),
        Demo::SoftReset => soft_reset(out),
    }
}

fn expect_report(out: &mut Transcript, r: Result<(), FwError>, pool: u32) -> Result<(), ScenarioError> {
    let report = match r {
        Err(FwError::Halt(Halt::Sanitizer(rep))) => rep,
        Err(e) => return Err(e.into()),
        Ok(()) => return Err(ScenarioError::Check("sanitizer did not fire".into())),
    };
    out.say(report.to_string());
    check(report.pool_addr == pool, format!("report names pool 0x{:x}, expected 0x{pool:x}", report.pool_addr))?;
    check(report.free_chunk == PLANTED, format!("free_chunk 0x{:x}, expected 0x{PLANTED:x}", report.free_chunk))?;
    out.say(format!("planted word 0x{PLANTED:08x} found in the next chunk header"));
    out.report = Some(report);
    Ok(())
}

fn eir(out: &mut Transcript) -> Result<(), ScenarioError> {
    let mut fw = Firmware::boot(FirmwareProfile::default(), SEED)?;
    fw.enable_sanitizer()?;
    out.say("inquiry running, sanitizer enabled");
    // Hardware copies payload byte 11 onwards to buffer offset 255, past the
    // event buffer, so the planted word rides in at byte 11.
    let mut body = vec![0x41u8; 0x400];
    body[11..15].copy_from_slice(&PLANTED.to_le_bytes());
    let h = PayloadHeader { llid: 2, flow: true, length: 240, rfu: 1 };
    out.say(format!(
        "EIR header length {} with RFU bits {}: parsed length {}",
        h.length,
        h.rfu,
        h.effective_length(true)
    ));
    expect_report(out, fw.on_eir(h, &body), layout::EVENT_POOL)
}

fn ble_pdu(out: &mut Transcript) -> Result<(), ScenarioError> {
    let mut fw = Firmware::fuzz_target(FirmwareProfile::default(), SEED)?;
    let crc_init = fw.le_connection().map(|c| c.crc_init).ok_or_else(|| ScenarioError::Check("no LE link".into()))?;
    out.say(format!("LE connection up, crc_init 0x{crc_init:06x}"));
    // Bytes 252..255 and the first CRC byte form the overflowing word. The
    // four bytes before them are chosen so the CRC starts with the top byte.
    let w = PLANTED.to_le_bytes();
    let mut pdu = vec![0x42u8; 255];
    pdu[252..255].copy_from_slice(&w[..3]);
    let mut prefix = vec![2u8, 255];
    prefix.extend_from_slice(&pdu[..248]);
    let adj = solve_crc_adjust(Crc24State::new(crc_init), &prefix, &pdu[252..], [w[3], 0x00, 0x00])
        .map_err(|e| ScenarioError::Check(e.to_string()))?;
    pdu[248..252].copy_from_slice(&adj);
    let mut msg = vec![2u8, 255];
    msg.extend_from_slice(&pdu);
    let crc = crc24(Crc24State::new(crc_init), &msg);
    out.say(format!("adjust bytes {:02x?} give CRC {:02x?}", adj, crc));
    fw.inject(&air::ble_with_crc(2, &pdu, crc));
    let r = fw.run_injected(1 << 12).map(|_| ()).map_err(FwError::Halt);
    expect_report(out, r, layout::BLE_RX_POOL)
}

fn acl(out: &mut Transcript) -> Result<(), ScenarioError> {
    let mut fw = Firmware::fuzz_target(FirmwareProfile::misconfig(), SEED)?;
    out.say("profile misconfig: ACL buffers advertised larger than allocated");
    let payload: Vec<u8> = PLANTED.to_le_bytes().iter().copied().cycle().take(400).collect();
    fw.inject(&air::acl(0, 2, &payload));
    out.say("sent 400-byte ACL payload");
    let r = fw.run_injected(1 << 12).map(|_| ()).map_err(FwError::Halt);
    expect_report(out, r, layout::ACL_POOL)
}

fn www(out: &mut Transcript) -> Result<(), ScenarioError> {
    let mut fw = Firmware::boot(FirmwareProfile::default(), SEED)?;
    let pool = fw.pools().ble_rx;
    let payload = *b"AAAA";
    let rec = pool.www_scenario(&mut fw.space, WWW_TARGET, &payload).map_err(FwError::from)?;
    out.say(format!("free chunk header at 0x{:08x} now points to 0x{:08x}", rec.overwritten_header, WWW_TARGET - 4));
    out.say(format!("allocation 1 -> 0x{:08x}", rec.first_alloc));
    out.say(format!("allocation 2 -> 0x{:08x}", rec.second_alloc));
    let landed = fw.space.read_bytes(WWW_TARGET, payload.len()).map_err(FwError::from)?;
    check(rec.second_alloc == WWW_TARGET && landed == payload, "payload not found at target")?;
    out.say(format!("write of {} bytes at 0x{WWW_TARGET:06x} confirmed", payload.len()));
    Ok(())
}

/// Outcome of one link-key request against a host that holds the key but
/// was never told the link is up.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyProbe {
    pub disclosed: bool,
    pub latency_ns: Option<u64>,
}

pub fn probe_link_key(cm: Countermeasure) -> Result<KeyProbe, ScenarioError> {
    let mut fw = Firmware::fuzz_target(FirmwareProfile::default(), SEED)?;
    let mut host = HostOracle::new(cm);
    let peer = fw.connection(0).ok_or(FwError::NoConnection(0))?.addr;
    let key = host.pair(peer);
    let mut pdu = vec![lmp_byte0(LMP_AU_RAND, 0)];
    pdu.extend_from_slice(&[0x5c; 16]);
    fw.inject(&air::lmp(0, &pdu));
    fw.run_injected(1 << 12)?;
    host.service(&mut fw).map_err(|e| ScenarioError::Check(e.to_string()))?;
    let wait = match cm {
        Countermeasure::Delay { ns } => ns,
        _ => 0,
    };
    fw.advance_time(wait + 1_000_000)?;
    let (req, rep) = fw.link_key_timing();
    let disclosed = fw.connection(0).and_then(|c| c.link_key) == Some(key);
    Ok(KeyProbe { disclosed, latency_ns: req.zip(rep).map(|(a, b)| b - a) })
}

fn link_key(out: &mut Transcript) -> Result<(), ScenarioError> {
    let off = probe_link_key(Countermeasure::Off)?;
    out.say(format!("countermeasure off: key for inactive link disclosed = {}", off.disclosed));
    check(off.disclosed, "host withheld the key with the countermeasure off")?;
    let active = probe_link_key(Countermeasure::ActiveOnly)?;
    out.say(format!("countermeasure active_only: key disclosed = {}", active.disclosed));
    check(!active.disclosed, "active_only released a key for an inactive link")?;
    let delay = Countermeasure::Delay { ns: 20_000_000 };
    let d = probe_link_key(delay)?;
    let lat = d.latency_ns.unwrap_or(0);
    out.say(format!("countermeasure {delay}: reply after {:.3} ms", lat as f64 / 1e6));
    check(lat >= 20_000_000, "delayed reply arrived early")?;
    Ok(())
}

fn coex(out: &mut Transcript) -> Result<(), ScenarioError> {
    let mut fw = Firmware::boot(FirmwareProfile::default(), SEED)?;
    let before = fw.wifi_state();
    out.say(format!("wifi_state {before}"));
    fw.mmio_write(0x650200, 0xff)?;
    let after = fw.wifi_state();
    out.say(format!("write 0xff to 0x650200: wifi_state {before} -> {after}"));
    check(before == WifiState::Ok && after == WifiState::Panic, "coexistence write had no effect")?;
    Ok(())
}

fn brick(out: &mut Transcript) -> Result<(), ScenarioError> {
    let mut fw = Firmware::boot(FirmwareProfile::default(), SEED)?;
    match fw.nvram_write(0x100, &[0xff; 8], true) {
        Err(FwError::Guard { slot }) => out.say(format!("HAL refused write to nvram slot 0x{slot:03x}")),
        other => return Err(ScenarioError::Check(format!("HAL write not refused: {other:?}"))),
    }
    fw.nvram_write(0x100, &[0xff; 8], false)?;
    out.say("raw write to slot 0x100 accepted");
    fw.hci_reset(ResetKind::Hard)?;
    fw.uart_rx(&H4Packet::command(OP_RESET, &[]).encode().expect("small packet"));
    fw.run_until_idle()?;
    let silent = fw.hci_output().is_empty();
    out.say(format!("after hard reset: bricked = {}, HCI answers = {}", fw.is_bricked(), !silent));
    check(fw.is_bricked() && silent, "controller still answers")?;
    Ok(())
}

fn soft_reset(out: &mut Transcript) -> Result<(), ScenarioError> {
    let mut fw = Firmware::boot(FirmwareProfile::default(), SEED)?;
    let marker = [0xa5u8; layout::BOOTCHECK_LEN as usize];
    fw.space.write_bytes(layout::BOOTCHECK, &marker).map_err(FwError::from)?;
    out.say(format!("marker written to bootcheck at 0x{:06x}", layout::BOOTCHECK));
    for _ in 0..100 {
        fw.hci_reset(ResetKind::Soft)?;
    }
    let kept = fw.bootcheck() == marker;
    out.say(format!("after 100 HCI_Reset: bootcheck unchanged = {kept}"));
    check(kept, "soft reset cleared bootcheck")?;
    fw.hci_reset(ResetKind::Hard)?;
    let cleared = fw.bootcheck() != marker;
    out.say(format!("after hard reset: marker cleared = {cleared}"));
    check(cleared, "hard reset kept bootcheck")?;
    Ok(())
}
