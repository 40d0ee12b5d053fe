//! Runs one packet sequence against a restored firmware instance.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::packet::PacketSequence;
use crate::firmware::{Coverage, Firmware, FirmwareProfile, FwError, RunEnd};
use crate::heap::{SanitizerReport, Trigger};
use crate::hooks::{FirmwareAbort, Halt, InstrumentationMode};

/// Tick budget per case.
pub const DEFAULT_TICK_BUDGET: u64 = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Outcome {
    Clean,
    HeapCorruption { report: SanitizerReport },
    FirmwareAbort { abort: FirmwareAbort },
    Timeout,
}

impl Outcome {
    pub fn name(&self) -> &'static str {
        match self {
            Outcome::Clean => "clean",
            Outcome::HeapCorruption { .. } => "heap_corruption",
            Outcome::FirmwareAbort { .. } => "firmware_abort",
            Outcome::Timeout => "timeout",
        }
    }

    pub fn is_crash(&self) -> bool {
        matches!(self, Outcome::HeapCorruption { .. } | Outcome::FirmwareAbort { .. })
    }
}

/// Crash dedupe key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Signature {
    pub outcome: String,
    pub pool_addr: u32,
    pub trigger: Option<Trigger>,
    /// Function executing when the case stopped.
    pub handler: String,
}

impl Signature {
    /// Short stable name usable as a file stem.
    pub fn id(&self) -> String {
        let trig = self.trigger.map_or("none".to_string(), |t| t.to_string());
        format!("{}-{:08x}-{}-{}", self.outcome, self.pool_addr, trig, self.handler)
    }
}

impl fmt::Display for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    #[serde(skip)]
    pub coverage: Coverage,
    pub outcome: Outcome,
    pub signature: Signature,
    pub ticks: u64,
}

impl Verdict {
    /// Human-readable rendering; corruption verdicts include the dump.
    pub fn render(&self) -> String {
        let mut s = format!(
            "outcome: {}\nsignature: {}\nticks: {}\nblocks: {}\n",
            self.outcome.name(),
            self.signature,
            self.ticks,
            self.coverage.len()
        );
        match &self.outcome {
            Outcome::HeapCorruption { report } => {
                s.push_str(&report.to_string());
                s.push('\n');
            }
            Outcome::FirmwareAbort { abort } => {
                s.push_str(&format!("abort: {abort}\n"));
            }
            _ => {}
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestoreMode {
    /// Roll back a pre-booted reference instance (default).
    #[default]
    Snapshot,
    /// Boot a new instance for every case.
    FreshBoot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecConfig {
    pub tick_budget: u64,
    pub restore: RestoreMode,
    pub instrumentation: InstrumentationMode,
}

impl Default for ExecConfig {
    fn default() -> Self {
        ExecConfig {
            tick_budget: DEFAULT_TICK_BUDGET,
            restore: RestoreMode::Snapshot,
            instrumentation: InstrumentationMode::Inline,
        }
    }
}

/// One worker's private firmware pair.
pub struct Executor {
    profile: FirmwareProfile,
    seed: u64,
    config: ExecConfig,
    reference: Firmware,
    fw: Firmware,
    crc_init: u32,
}

impl Executor {
    pub fn new(profile: FirmwareProfile, seed: u64, config: ExecConfig) -> Result<Self, FwError> {
        let reference = Self::target(&profile, seed, config.instrumentation)?;
        let crc_init = reference.le_connection().map_or(0, |c| c.crc_init);
        let mut fw = reference.clone();
        fw.set_campaign_active(true);
        Ok(Executor { profile, seed, config, reference, fw, crc_init })
    }

    fn target(profile: &FirmwareProfile, seed: u64, mode: InstrumentationMode) -> Result<Firmware, FwError> {
        let mut fw = Firmware::fuzz_target(profile.clone(), seed)?;
        fw.set_instrumentation_mode(mode)?;
        Ok(fw)
    }

    pub fn config(&self) -> ExecConfig {
        self.config
    }

    /// The instance the last case ran on.
    pub fn firmware(&self) -> &Firmware {
        &self.fw
    }

    pub fn run(&mut self, seq: &PacketSequence) -> Verdict {
        match self.config.restore {
            RestoreMode::Snapshot => self.fw.restore_from(&self.reference),
            RestoreMode::FreshBoot => {
                self.fw = Self::target(&self.profile, self.seed, self.config.instrumentation)
                    .expect("profile booted once already");
                self.fw.reset_coverage();
            }
        }
        for p in &seq.packets {
            self.fw.inject(&p.to_air(self.crc_init));
        }
        let res = self.fw.run_injected(self.config.tick_budget);
        let handler = self.fw.halt_handler().unwrap_or("-").to_string();
        let (outcome, ticks) = match res {
            Ok(r) if r.end == RunEnd::TickBudget => (Outcome::Timeout, r.ticks),
            Ok(r) => (Outcome::Clean, r.ticks),
            Err(Halt::Sanitizer(report)) => (Outcome::HeapCorruption { report }, self.fw.ticks()),
            Err(Halt::Abort(abort)) => (Outcome::FirmwareAbort { abort }, self.fw.ticks()),
            Err(Halt::Hook(reason)) => {
                (Outcome::FirmwareAbort { abort: FirmwareAbort::Assert { reason } }, self.fw.ticks())
            }
        };
        let signature = signature_of(&outcome, &handler);
        Verdict { coverage: *self.fw.coverage(), outcome, signature, ticks }
    }
}

fn signature_of(outcome: &Outcome, handler: &str) -> Signature {
    let (pool_addr, trigger) = match outcome {
        Outcome::HeapCorruption { report } => (report.pool_addr, Some(report.trigger)),
        Outcome::FirmwareAbort { abort: FirmwareAbort::PoolExhausted { pool_addr } } => (*pool_addr, None),
        _ => (0, None),
    };
    let handler = if outcome.is_crash() { handler.to_string() } else { "-".to_string() };
    Signature { outcome: outcome.name().to_string(), pool_addr, trigger, handler }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::firmware::layout::b;
    use crate::fuzzer::packet::{Packet, PacketKind};

    fn exec(profile: FirmwareProfile) -> Executor {
        Executor::new(profile, 11, ExecConfig::default()).unwrap()
    }

    #[test]
    fn null_seed_runs_clean() {
        let mut e = exec(FirmwareProfile::default());
        let v = e.run(&PacketSequence::new(vec![Packet::null(PacketKind::Lmp)]));
        assert_eq!(v.outcome, Outcome::Clean);
        assert!(v.coverage.contains(b::LM_LMP));
        assert_eq!(v, e.run(&PacketSequence::new(vec![Packet::null(PacketKind::Lmp)])));
    }

    #[test]
    fn ble_overflow_is_heap_corruption() {
        let mut e = exec(FirmwareProfile::default());
        let mut pdu = vec![0x41u8; 255];
        pdu[252..255].copy_from_slice(&[0xef, 0xbe, 0xad]);
        let v = e.run(&PacketSequence::new(vec![Packet::with_header(PacketKind::BlePdu, vec![2], pdu)]));
        let Outcome::HeapCorruption { report } = &v.outcome else { panic!("{:?}", v.outcome) };
        assert_eq!(v.signature.pool_addr, report.pool_addr);
        assert!(v.render().contains("Heap Corruption Detected"));
        let again =
            e.run(&PacketSequence::new(vec![Packet::with_header(PacketKind::BlePdu, vec![2], vec![0x41u8; 255])]));
        assert!(matches!(again.outcome, Outcome::HeapCorruption { .. }));
    }

    #[test]
    fn tick_budget_gives_timeout() {
        let mut e =
            Executor::new(FirmwareProfile::default(), 1, ExecConfig { tick_budget: 2, ..Default::default() }).unwrap();
        let v = e.run(&PacketSequence::new(vec![Packet::null(PacketKind::Lmp); 4]));
        assert_eq!(v.outcome, Outcome::Timeout);
    }

    #[test]
    fn gate_order_reaches_finalize() {
        let mut e = exec(FirmwareProfile::default());
        let p = |b: u8| Packet::new(PacketKind::Lmp, vec![b]);
        let v = e.run(&PacketSequence::new(vec![p(51 << 1), p(47 << 1), p(49 << 1)]));
        assert!(v.coverage.contains(b::SETUP_FINALIZE));
        let v = e.run(&PacketSequence::new(vec![p(47 << 1), p(51 << 1), p(49 << 1)]));
        assert!(!v.coverage.contains(b::SETUP_FINALIZE));
    }

    #[test]
    fn fresh_boot_matches_snapshot_restore() {
        let seq = PacketSequence::new(vec![
            Packet::new(PacketKind::Acl, vec![5; 30]),
            Packet::new(PacketKind::Lmp, vec![0x4a]),
        ]);
        let mut a = exec(FirmwareProfile::default());
        let mut b = Executor::new(
            FirmwareProfile::default(),
            11,
            ExecConfig { restore: RestoreMode::FreshBoot, ..Default::default() },
        )
        .unwrap();
        let va = a.run(&seq);
        let vb = b.run(&seq);
        assert_eq!(va, vb);
    }
}
