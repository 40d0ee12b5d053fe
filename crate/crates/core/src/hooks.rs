//! Function interposition over the firmware's static dispatch table.
//!
//! A hooked function runs `pre -> original -> post`. While the original runs
//! its entry is taken out of the registry, so a recursive call reaches the
//! unhooked body, mirroring a trampoline that restores the prologue for the
//! duration of the call and re-patches it afterwards.
//!
//! Every installed hook consumes Patchram slots from a [`PatchramProfile`].

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heap::{HeapError, SanitizerReport};
use crate::memory::{AddressSpace, MemError};

pub const SLOT_WIDTH: u32 = 4;

/// Index into the firmware's function table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FnId(pub u16);

/// Static description of the firmware's callable functions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FnTable {
    names: Vec<String>,
    addrs: Vec<u32>,
    returns: Vec<bool>,
}

impl FnTable {
    pub fn new() -> Self {
        FnTable { names: Vec::new(), addrs: Vec::new(), returns: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, addr: u32, returns: bool) -> FnId {
        let id = FnId(self.names.len() as u16);
        self.names.push(name.into());
        self.addrs.push(addr);
        self.returns.push(returns);
        id
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, f: FnId) -> &str {
        &self.names[f.0 as usize]
    }

    pub fn addr(&self, f: FnId) -> u32 {
        self.addrs[f.0 as usize]
    }

    pub fn returns(&self, f: FnId) -> bool {
        self.returns[f.0 as usize]
    }

    pub fn lookup(&self, name: &str) -> Option<FnId> {
        self.names.iter().position(|n| n == name).map(|i| FnId(i as u16))
    }

    pub fn ids(&self) -> impl Iterator<Item = FnId> {
        (0..self.names.len() as u16).map(FnId)
    }
}

impl Default for FnTable {
    fn default() -> Self {
        Self::new()
    }
}

/// Non-sanitizer reasons for the firmware to stop.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize, Error)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FirmwareAbort {
    #[error("pool 0x{pool_addr:08x} exhausted")]
    PoolExhausted { pool_addr: u32 },
    #[error("heap check failed for 0x{payload:08x}")]
    HeapCheck { payload: u32, lr: u32 },
    #[error("memory fault at 0x{addr:08x}")]
    Fault { addr: u32 },
    #[error("release of pointer 0x{addr:08x} outside all pools")]
    ForeignRelease { addr: u32 },
    #[error("assertion: {reason}")]
    Assert { reason: String },
}

impl From<MemError> for FirmwareAbort {
    fn from(e: MemError) -> Self {
        FirmwareAbort::Fault { addr: e.addr() }
    }
}

impl From<HeapError> for FirmwareAbort {
    fn from(e: HeapError) -> Self {
        match e {
            HeapError::Exhausted { pool_addr } => FirmwareAbort::PoolExhausted { pool_addr },
            HeapError::Canary { payload, lr } => FirmwareAbort::HeapCheck { payload, lr },
            HeapError::Fault(m) => m.into(),
            other => FirmwareAbort::Assert { reason: other.to_string() },
        }
    }
}

/// Why execution stopped before reaching idle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Halt {
    Sanitizer(SanitizerReport),
    Abort(FirmwareAbort),
    /// Requested by a hook callback.
    Hook(String),
}

impl From<MemError> for Halt {
    fn from(e: MemError) -> Self {
        Halt::Abort(e.into())
    }
}

impl From<HeapError> for Halt {
    fn from(e: HeapError) -> Self {
        Halt::Abort(e.into())
    }
}

impl From<FirmwareAbort> for Halt {
    fn from(e: FirmwareAbort) -> Self {
        Halt::Abort(e)
    }
}

impl fmt::Display for Halt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Halt::Sanitizer(r) => r.fmt(f),
            Halt::Abort(a) => write!(f, "firmware abort: {a}"),
            Halt::Hook(s) => write!(f, "halted by hook: {s}"),
        }
    }
}

pub enum HookFlow {
    Continue,
    Halt(Halt),
}

/// View handed to hook callbacks.
pub struct HookCtx<'a> {
    pub lr: u32,
    pub fn_id: FnId,
    pub args: &'a mut [u32],
    /// Set for post callbacks of returning functions.
    pub ret: Option<u32>,
    pub space: &'a mut AddressSpace,
}

pub type Callback = Arc<dyn Fn(&mut HookCtx<'_>) -> HookFlow + Send + Sync>;

#[derive(Clone)]
pub struct HookPoint {
    pub fn_id: FnId,
    pub pre: Option<Callback>,
    pub post: Option<Callback>,
    /// Record a [`TraceEvent`] for every call.
    pub trace: bool,
    pub slot_cost: u32,
}

impl HookPoint {
    pub fn new(fn_id: FnId) -> Self {
        HookPoint { fn_id, pre: None, post: None, trace: false, slot_cost: 1 }
    }

    pub fn pre(mut self, cb: impl Fn(&mut HookCtx<'_>) -> HookFlow + Send + Sync + 'static) -> Self {
        self.pre = Some(Arc::new(cb));
        self
    }

    pub fn post(mut self, cb: impl Fn(&mut HookCtx<'_>) -> HookFlow + Send + Sync + 'static) -> Self {
        self.post = Some(Arc::new(cb));
        self
    }

    pub fn traced(mut self) -> Self {
        self.trace = true;
        self
    }

    pub fn cost(mut self, slots: u32) -> Self {
        self.slot_cost = slots;
        self
    }
}

impl fmt::Debug for HookPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HookPoint")
            .field("fn_id", &self.fn_id)
            .field("pre", &self.pre.is_some())
            .field("post", &self.post.is_some())
            .field("trace", &self.trace)
            .field("slot_cost", &self.slot_cost)
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HookHandle {
    pub fn_id: FnId,
    serial: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchramProfile {
    pub total_slots: u32,
    pub used_slots: u32,
}

impl PatchramProfile {
    pub fn new(total_slots: u32) -> Self {
        PatchramProfile { total_slots, used_slots: 0 }
    }

    pub fn free_slots(&self) -> u32 {
        self.total_slots - self.used_slots
    }

    pub fn slot_width(&self) -> u32 {
        SLOT_WIDTH
    }

    /// Bytes of ROM space covered by the installed overlays.
    pub fn patched_bytes(&self) -> u32 {
        self.used_slots * SLOT_WIDTH
    }
}

impl fmt::Display for PatchramProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.used_slots, self.total_slots)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HookError {
    #[error("patchram budget exhausted: {used}/{total} slots used, {needed} more needed")]
    SlotBudget { used: u32, total: u32, needed: u32 },
    #[error("function `{0}` is already hooked")]
    AlreadyHooked(String),
    #[error("unknown function id {0}")]
    UnknownFunction(u16),
    #[error("stale hook handle for `{0}`")]
    StaleHandle(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub caller_lr: u32,
    pub fn_name: String,
    pub args: Vec<u32>,
    pub ret: Option<u32>,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "lr=0x{:06x} {}(", self.caller_lr, self.fn_name)?;
        for (i, a) in self.args.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "0x{a:x}")?;
        }
        f.write_str(")")?;
        match self.ret {
            Some(r) => write!(f, " = 0x{r:x};"),
            None => f.write_str(";"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceLine {
    Call(TraceEvent),
    ContextSwitch { from: String, to: String },
}

impl fmt::Display for TraceLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceLine::Call(e) => e.fmt(f),
            TraceLine::ContextSwitch { from, to } => write!(f, "Context switch {from} -> {to}"),
        }
    }
}

/// One line per event, each terminated by a newline. Empty input gives "".
pub fn render_trace(events: &[TraceEvent]) -> String {
    let mut s = String::new();
    for e in events {
        s.push_str(&e.to_string());
        s.push('\n');
    }
    s
}

pub fn render_lines(lines: &[TraceLine]) -> String {
    let mut s = String::new();
    for l in lines {
        s.push_str(&l.to_string());
        s.push('\n');
    }
    s
}

#[derive(Clone)]
struct Entry {
    point: HookPoint,
    serial: u64,
    system: bool,
}

/// Installed hooks indexed by function id.
#[derive(Clone)]
pub struct HookRegistry {
    table: Arc<FnTable>,
    entries: Vec<Option<Entry>>,
    /// Functions whose entry is taken out while their original body runs.
    in_flight: Vec<bool>,
    profile: PatchramProfile,
    serial: u64,
    trace: Vec<TraceLine>,
    trace_limit: usize,
    calls: u64,
}

impl HookRegistry {
    pub fn new(table: Arc<FnTable>, total_slots: u32) -> Self {
        let n = table.len();
        HookRegistry {
            table,
            entries: (0..n).map(|_| None).collect(),
            in_flight: vec![false; n],
            profile: PatchramProfile::new(total_slots),
            serial: 0,
            trace: Vec::new(),
            trace_limit: 1 << 20,
            calls: 0,
        }
    }

    pub fn table(&self) -> &Arc<FnTable> {
        &self.table
    }

    pub fn profile(&self) -> PatchramProfile {
        self.profile
    }

    pub fn install(&mut self, hook: HookPoint) -> Result<HookHandle, HookError> {
        self.install_inner(hook, false)
    }

    /// Installs a hook owned by the firmware itself. It counts against the
    /// budget like any other but is listed separately.
    pub fn install_system(&mut self, hook: HookPoint) -> Result<HookHandle, HookError> {
        self.install_inner(hook, true)
    }

    fn install_inner(&mut self, hook: HookPoint, system: bool) -> Result<HookHandle, HookError> {
        let i = hook.fn_id.0 as usize;
        if i >= self.entries.len() {
            return Err(HookError::UnknownFunction(hook.fn_id.0));
        }
        if self.entries[i].is_some() || self.in_flight[i] {
            return Err(HookError::AlreadyHooked(self.table.name(hook.fn_id).to_string()));
        }
        if hook.slot_cost > self.profile.free_slots() {
            return Err(HookError::SlotBudget {
                used: self.profile.used_slots,
                total: self.profile.total_slots,
                needed: hook.slot_cost,
            });
        }
        self.profile.used_slots += hook.slot_cost;
        self.serial += 1;
        let handle = HookHandle { fn_id: hook.fn_id, serial: self.serial };
        self.entries[i] = Some(Entry { point: hook, serial: self.serial, system });
        Ok(handle)
    }

    pub fn uninstall(&mut self, handle: HookHandle) -> Result<HookPoint, HookError> {
        let i = handle.fn_id.0 as usize;
        match self.entries.get(i) {
            Some(Some(e)) if e.serial == handle.serial => {
                let e = self.entries[i].take().expect("checked above");
                self.profile.used_slots -= e.point.slot_cost;
                Ok(e.point)
            }
            Some(_) => Err(HookError::StaleHandle(self.table.name(handle.fn_id).to_string())),
            None => Err(HookError::UnknownFunction(handle.fn_id.0)),
        }
    }

    #[inline]
    pub fn is_hooked(&self, f: FnId) -> bool {
        self.entries[f.0 as usize].is_some()
    }

    pub fn installed(&self) -> impl Iterator<Item = (FnId, &HookPoint, bool)> {
        self.entries.iter().enumerate().filter_map(|(i, e)| e.as_ref().map(|e| (FnId(i as u16), &e.point, e.system)))
    }

    pub fn installed_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_some()).count()
    }

    /// Sum of slot costs over installed hooks (equals `profile().used_slots`).
    pub fn slot_sum(&self) -> u32 {
        self.entries.iter().flatten().map(|e| e.point.slot_cost).sum()
    }

    /// Number of hooked calls dispatched so far.
    pub fn hooked_calls(&self) -> u64 {
        self.calls
    }

    /// Removes the entry for the duration of the original call.
    #[doc(hidden)]
    pub fn take_for_call(&mut self, f: FnId) -> Option<HookPoint> {
        let i = f.0 as usize;
        let e = self.entries[i].as_mut()?;
        self.calls += 1;
        let point = HookPoint {
            fn_id: e.point.fn_id,
            pre: e.point.pre.take(),
            post: e.point.post.take(),
            trace: e.point.trace,
            slot_cost: e.point.slot_cost,
        };
        self.in_flight[i] = true;
        Some(point)
    }

    #[doc(hidden)]
    pub fn restore_after_call(&mut self, point: HookPoint) {
        let i = point.fn_id.0 as usize;
        self.in_flight[i] = false;
        if let Some(e) = self.entries[i].as_mut() {
            e.point.pre = point.pre;
            e.point.post = point.post;
        }
    }

    #[doc(hidden)]
    pub fn in_flight(&self, f: FnId) -> bool {
        self.in_flight[f.0 as usize]
    }

    pub fn record(&mut self, line: TraceLine) {
        if self.trace.len() < self.trace_limit {
            self.trace.push(line);
        }
    }

    pub fn trace(&self) -> &[TraceLine] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<TraceLine> {
        std::mem::take(&mut self.trace)
    }

    /// Records a call at entry and returns its index so the return value can
    /// be filled in once the callee finishes.
    pub fn record_call(&mut self, ev: TraceEvent) -> Option<usize> {
        if self.trace.len() < self.trace_limit {
            self.trace.push(TraceLine::Call(ev));
            Some(self.trace.len() - 1)
        } else {
            None
        }
    }

    pub fn set_trace_ret(&mut self, idx: usize, ret: Option<u32>) {
        if let Some(TraceLine::Call(e)) = self.trace.get_mut(idx) {
            e.ret = ret;
        }
    }

    pub fn set_trace_limit(&mut self, n: usize) {
        self.trace_limit = n;
    }
}

impl fmt::Debug for HookRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HookRegistry")
            .field("profile", &self.profile)
            .field("installed", &self.installed_count())
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstrumentationMode {
    /// Hooks fire only at installed functions; coverage is a bit set.
    #[default]
    Inline,
    /// Additionally a generic callback fires at every executed block with a
    /// copy of the register file and a copying memory API.
    PerEventCallback,
}

impl std::str::FromStr for InstrumentationMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "inline" => Ok(InstrumentationMode::Inline),
            "per_event_callback" | "per-event-callback" => Ok(InstrumentationMode::PerEventCallback),
            _ => Err(format!("unknown instrumentation mode `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("instrumentation mode cannot change while a campaign is running")]
pub struct StateError;

/// Delivered to the generic callback for each executed block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockEvent {
    pub block: u16,
    pub pc: u32,
    pub regs: [u32; 16],
}

/// Memory access as offered to per-block callbacks: every read returns a
/// fresh copy.
pub trait MemoryView {
    fn mem_read(&self, addr: u32, len: usize) -> Result<Vec<u8>, MemError>;

    fn mem_read_u32(&self, addr: u32) -> Result<u32, MemError> {
        let v = self.mem_read(addr, 4)?;
        Ok(u32::from_le_bytes([v[0], v[1], v[2], v[3]]))
    }
}

impl MemoryView for AddressSpace {
    fn mem_read(&self, addr: u32, len: usize) -> Result<Vec<u8>, MemError> {
        self.read_bytes(addr, len)
    }
}

pub type BlockCallback = Arc<dyn Fn(&BlockEvent, &dyn MemoryView) -> Option<Halt> + Send + Sync>;

#[cfg(test)]
mod tests {
    use super::*;

    fn table(n: usize) -> Arc<FnTable> {
        let mut t = FnTable::new();
        t.push("dynamic_memory_AllocateOrDie", 0x1000, true);
        t.push("dynamic_memory_Release", 0x1100, false);
        for i in 2..n {
            t.push(format!("f{i}"), 0x2000 + i as u32 * 0x10, false);
        }
        Arc::new(t)
    }

    #[test]
    fn budget_cap_256() {
        let mut r = HookRegistry::new(table(300), 256);
        for i in 0..256 {
            r.install(HookPoint::new(FnId(i))).unwrap();
        }
        assert!(matches!(r.install(HookPoint::new(FnId(256))), Err(HookError::SlotBudget { .. })));
        assert_eq!(r.profile().to_string(), "256/256");
    }

    #[test]
    fn duplicate_and_unknown() {
        let mut r = HookRegistry::new(table(4), 256);
        r.install(HookPoint::new(FnId(1))).unwrap();
        assert!(matches!(r.install(HookPoint::new(FnId(1))), Err(HookError::AlreadyHooked(_))));
        assert!(matches!(r.install(HookPoint::new(FnId(9))), Err(HookError::UnknownFunction(9))));
    }

    #[test]
    fn uninstall_returns_slots() {
        let mut r = HookRegistry::new(table(4), 2);
        let h = r.install(HookPoint::new(FnId(0)).cost(2)).unwrap();
        assert!(r.install(HookPoint::new(FnId(1))).is_err());
        r.uninstall(h).unwrap();
        assert_eq!(r.profile().used_slots, 0);
        assert!(r.uninstall(h).is_err());
        r.install(HookPoint::new(FnId(1))).unwrap();
        assert_eq!(r.slot_sum(), r.profile().used_slots);
    }

    #[test]
    fn trace_lines_match_listing() {
        let alloc = TraceEvent {
            caller_lr: 0x054a37,
            fn_name: "dynamic_memory_AllocateOrDie".into(),
            args: vec![0x2f],
            ret: Some(0x21fb50),
        };
        let rel = TraceEvent {
            caller_lr: 0x02cccf,
            fn_name: "dynamic_memory_Release".into(),
            args: vec![0x21fb1c],
            ret: None,
        };
        assert_eq!(alloc.to_string(), "lr=0x054a37 dynamic_memory_AllocateOrDie(0x2f) = 0x21fb50;");
        assert_eq!(rel.to_string(), "lr=0x02cccf dynamic_memory_Release(0x21fb1c);");
        assert_eq!(render_trace(&[]), "");
        assert_eq!(render_trace(&[alloc, rel]).lines().count(), 2);
        let cs = TraceLine::ContextSwitch { from: "idle".into(), to: "lm".into() };
        assert_eq!(cs.to_string(), "Context switch idle -> lm");
    }

    #[test]
    fn multi_arg_rendering() {
        let e = TraceEvent {
            caller_lr: 0x5a0c1,
            fn_name: "utils_memcpy8".into(),
            args: vec![0x2232d0, 0x370c00, 0xff],
            ret: None,
        };
        assert_eq!(e.to_string(), "lr=0x05a0c1 utils_memcpy8(0x2232d0, 0x370c00, 0xff);");
    }
}
