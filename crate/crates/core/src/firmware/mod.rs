//! The synthetic controller.
//!
//! Guest state lives in an [`AddressSpace`]; the heap pools, DMA buffer,
//! bootcheck and link table are ordinary RAM. Control state that the original
//! keeps in RAM as well (queues, connection contexts, timers) is mirrored
//! Rust-side and restored together with the space.
//!
//! Firmware functions run through [`Firmware::call`], which is where hooks
//! interpose. Coverage is recorded per static block id.

pub mod air;
pub mod coex;
pub mod coverage;
pub mod layout;
mod lm;
mod rx;
mod transport;

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::sync::{Arc, OnceLock};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heap::{BlocPool, HeapError, SanitizerReport, Trigger};
use crate::hooks::{
    BlockCallback, BlockEvent, FirmwareAbort, FnId, Halt, HookError, HookFlow, HookHandle, HookPoint, HookRegistry,
    InstrumentationMode, StateError, TraceEvent, TraceLine,
};
use crate::memory::{
    load_snapshot, save_snapshot, AddressSpace, LayoutError, MemError, SegmentKind, SnapshotError, SnapshotManifest,
};
use crate::modem::{ByteSource, Injector, Modem, PhyFlags, RX_CHUNK};

pub use air::PayloadHeader;
pub use coex::{CoexDevice, CoexPreset, WifiState};
pub use coverage::Coverage;
use layout::*;
pub use lm::sres;

/// Simulated delay before an unanswered remote-name buffer is reclaimed.
pub const NAME_TIMEOUT_NS: u64 = 5_000_000_000;
/// Paging completes this long after Create_Connection.
pub const PAGING_NS: u64 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FirmwareProfile {
    pub name: String,
    pub acl_signaled_len: u16,
    pub acl_signaled_pkts: u16,
    pub acl_internal_len: u16,
    pub ble_pool_size: u32,
    pub ble_pool_capacity: u32,
    pub patchram_slots: u32,
    pub s10_canary: bool,
    pub rfu_bug: bool,
    pub ble_crc_copy_bug: bool,
}

impl Default for FirmwareProfile {
    fn default() -> Self {
        FirmwareProfile {
            name: "default".into(),
            acl_signaled_len: 1021,
            acl_signaled_pkts: 8,
            acl_internal_len: 1021,
            ble_pool_size: 0x108,
            ble_pool_capacity: 0x0f,
            patchram_slots: 256,
            s10_canary: false,
            rfu_bug: true,
            ble_crc_copy_bug: true,
        }
    }
}

impl FirmwareProfile {
    pub const NAMES: &'static [&'static str] = &["default", "misconfig", "s10", "patchram128"];

    /// ACL buffers sized 384 internally while 1021 is signaled to the host.
    pub fn misconfig() -> Self {
        FirmwareProfile { name: "misconfig".into(), acl_internal_len: 384, ..Self::default() }
    }

    /// Heap variant with a saved LR and a static canary byte per chunk.
    pub fn s10() -> Self {
        FirmwareProfile { name: "s10".into(), s10_canary: true, ..Self::default() }
    }

    pub fn patchram128() -> Self {
        FirmwareProfile { name: "patchram128".into(), patchram_slots: 128, ..Self::default() }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default()),
            "misconfig" => Some(Self::misconfig()),
            "s10" => Some(Self::s10()),
            "patchram128" => Some(Self::patchram128()),
            _ => None,
        }
    }

    pub fn is_misconfig(&self) -> bool {
        self.acl_internal_len < self.acl_signaled_len
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.acl_internal_len == 0 || self.acl_internal_len > 1021 {
            return Err(format!("acl_internal_len {} outside 1..=1021", self.acl_internal_len));
        }
        if self.acl_signaled_len == 0 || self.acl_signaled_len > 1021 {
            return Err(format!("acl_signaled_len {} outside 1..=1021", self.acl_signaled_len));
        }
        if self.ble_pool_size < BLE_RX_HDR + 1 || self.ble_pool_capacity == 0 {
            return Err("ble pool too small".into());
        }
        let ble_end = BLE_POOL_START as u64 + self.ble_pool_capacity as u64 * (self.ble_pool_size as u64 + 4);
        if ble_end > (RAM_BASE + RAM_LEN) as u64 {
            return Err("ble pool does not fit in RAM".into());
        }
        if self.patchram_slots < 16 {
            return Err(format!("patchram_slots {} too small", self.patchram_slots));
        }
        Ok(())
    }
}

/// BCS tasks. The numeric value is the task id carried in `pkt_log`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum Task {
    Acl = 0,
    Sco = 1,
    LeConn = 2,
    Inquiry = 3,
    Paging = 4,
    Advertising = 5,
}

impl Task {
    pub const ALL: [Task; 6] = [Task::Acl, Task::Sco, Task::LeConn, Task::Inquiry, Task::Paging, Task::Advertising];

    pub fn from_id(id: u8) -> Option<Task> {
        Task::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Acl => "acl",
            Task::Sco => "sco",
            Task::LeConn => "le_conn",
            Task::Inquiry => "inquiry",
            Task::Paging => "paging",
            Task::Advertising => "advertising",
        }
    }

    fn bit(self) -> u8 {
        1 << self as u8
    }

    /// Low-energy tasks carry an 8-bit length in the second header byte.
    pub fn is_le(self) -> bool {
        matches!(self, Task::LeConn | Task::Advertising)
    }
}

/// `pkt_log`: task id in bits 0-2, link index in bits 3-5.
pub fn pkt_log(task: Task, link: u8) -> u16 {
    task as u16 | ((link as u16 & 7) << 3)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Thread {
    Idle,
    Lm,
    BtTransport,
}

impl Thread {
    pub fn name(self) -> &'static str {
        match self {
            Thread::Idle => "idle",
            Thread::Lm => "lm",
            Thread::BtTransport => "bttransport",
        }
    }

    fn from_u32(v: u32) -> Thread {
        match v {
            1 => Thread::Lm,
            2 => Thread::BtTransport,
            _ => Thread::Idle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetKind {
    Soft,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum LmMsg {
    Lmp { buf: u32 },
    HciCmd { buf: u32 },
    Timer(TimerKind),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum BtMsg {
    SendEvent { buf: u32 },
    SendAcl { buf: u32, off: u32, len: u32, handle: u16 },
    UartRx(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum TimerKind {
    NameTimeout { link: u8, buf: u32 },
    PagingDone { addr: [u8; 6] },
    InquiryDone,
    UartDelivery(Vec<u8>),
}

impl TimerKind {
    fn code(&self) -> u32 {
        match self {
            TimerKind::NameTimeout { .. } => 1,
            TimerKind::PagingDone { .. } => 2,
            TimerKind::InquiryDone => 3,
            TimerKind::UartDelivery(_) => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Timer {
    deadline: u64,
    seq: u64,
    kind: TimerKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct NamePending {
    buf: u32,
    filled: u32,
}

/// Classic connection context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conn {
    pub addr: [u8; 6],
    pub handle: u16,
    pub link_key: Option<[u8; 16]>,
    pub setup_done: bool,
    gate: u8,
    enc_mode: bool,
    encrypted: bool,
    auth_rand: Option<[u8; 16]>,
    expect_sres: Option<[u8; 4]>,
    name: Option<NamePending>,
}

impl Conn {
    fn new(addr: [u8; 6], handle: u16) -> Self {
        Conn {
            addr,
            handle,
            link_key: None,
            setup_done: false,
            gate: 0,
            enc_mode: false,
            encrypted: false,
            auth_rand: None,
            expect_sres: None,
            name: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeConn {
    pub crc_init: u32,
    pub handle: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct RxProgress {
    task: Task,
    link: u8,
    pkt_log: u16,
    hdr: u16,
    frames: u32,
    frame: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct UartRx {
    fifo: VecDeque<u8>,
    pkt: Vec<u8>,
}

/// Drop and traffic counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub eir_dropped: u32,
    pub ble_dropped: u32,
    pub acl_dropped: u32,
    pub lmp_dropped: u32,
    pub events_sent: u32,
    pub acl_sent: u32,
    pub lmp_sent: u32,
    pub timers_fired: u32,
    pub uart_bytes_in: u32,
}

#[derive(Debug, Clone)]
struct FwState {
    lm_q: VecDeque<LmMsg>,
    bt_q: VecDeque<BtMsg>,
    thread: Thread,
    enabled: u8,
    active: Task,
    rx: Option<RxProgress>,
    conns: [Option<Conn>; CONN_SLOTS],
    le: Option<LeConn>,
    timers: Vec<Timer>,
    timer_seq: u64,
    uart: UartRx,
    air_tx: VecDeque<Vec<u8>>,
    paging: Option<[u8; 6]>,
    scan_enabled: bool,
    rng: ChaCha8Rng,
    counters: Counters,
    link_key_requested_ns: Option<u64>,
    link_key_reply_ns: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pools {
    pub lm: BlocPool,
    pub event: BlocPool,
    pub acl: BlocPool,
    pub ble_rx: BlocPool,
}

impl Pools {
    pub fn all(&self) -> [BlocPool; 4] {
        [self.lm, self.event, self.acl, self.ble_rx]
    }

    pub fn by_name(&self, name: &str) -> Option<BlocPool> {
        match name {
            "lm_pool" | "lm" => Some(self.lm),
            "event_pool" | "event" => Some(self.event),
            "acl_pool" | "acl" => Some(self.acl),
            "ble_rx_pool" | "ble_rx" | "ble" => Some(self.ble_rx),
            _ => None,
        }
    }

    pub fn name_of(&self, pool_addr: u32) -> &'static str {
        match pool_addr {
            LM_POOL => "lm_pool",
            EVENT_POOL => "event_pool",
            ACL_POOL => "acl_pool",
            BLE_RX_POOL => "ble_rx_pool",
            _ => "unknown_pool",
        }
    }

    fn general(&self) -> [BlocPool; 3] {
        [self.lm, self.event, self.acl]
    }
}

/// Runs every pool's free-list check and returns the first violation.
pub fn sanitize_pools(pools: &[BlocPool], space: &AddressSpace, trigger: Trigger) -> Option<SanitizerReport> {
    pools.iter().find_map(|p| p.sanitize(space, trigger).err())
}

#[derive(Clone, Default)]
struct Instr {
    mode: InstrumentationMode,
    user_cb: Option<BlockCallback>,
    block_sanitizer: Option<BlockCallback>,
    sanitizer: bool,
    sanitizer_hooks: Vec<HookHandle>,
    campaign_active: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSummary {
    pub lm_events: u32,
    pub bt_events: u32,
    pub context_switches: u32,
}

/// How a run over modem input ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunEnd {
    /// Input consumed and all queues drained.
    Idle,
    /// The byte source ran dry at a header read.
    Exhausted,
    /// Tick budget used up first.
    TickBudget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub end: RunEnd,
    pub ticks: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FwError {
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error("invalid profile: {0}")]
    Profile(String),
    #[error(transparent)]
    Fault(#[from] MemError),
    #[error("nvram slot 0x{slot:03x} is reserved; the HAL only accepts slots from 0x200")]
    Guard { slot: u16 },
    #[error("task {0:?} is not active")]
    TaskInactive(Task),
    #[error("no connection on link {0}")]
    NoConnection(u8),
    #[error("controller is bricked")]
    Bricked,
    #[error("{0}")]
    Halt(Halt),
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Hook(#[from] HookError),
    #[error(transparent)]
    Heap(#[from] HeapError),
}

impl From<Halt> for FwError {
    fn from(h: Halt) -> Self {
        FwError::Halt(h)
    }
}

impl From<SnapshotError> for FwError {
    fn from(e: SnapshotError) -> Self {
        FwError::Snapshot(e.to_string())
    }
}

/// State that survives a hard reset.
#[derive(Clone)]
struct Persist {
    hooks: HookRegistry,
    instr: Instr,
    tracing: bool,
    nvram: BTreeMap<u16, Vec<u8>>,
    bricked: bool,
    wifi: WifiState,
    hci_out: Vec<u8>,
}

#[derive(Clone)]
pub struct Firmware {
    pub space: AddressSpace,
    st: FwState,
    hooks: HookRegistry,
    modem: Modem,
    injector: Injector,
    profile: FirmwareProfile,
    seed: u64,
    rom: Arc<Vec<u8>>,
    pools: Pools,
    cov: Coverage,
    blocks_executed: u64,
    instr: Instr,
    regs: [u32; 16],
    stack: Vec<FnId>,
    halt_site: Option<FnId>,
    tracing: bool,
    nvram: BTreeMap<u16, Vec<u8>>,
    bricked: bool,
    hci_out: Vec<u8>,
    air_log: Vec<Vec<u8>>,
}

impl fmt::Debug for Firmware {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Firmware")
            .field("profile", &self.profile.name)
            .field("seed", &self.seed)
            .field("ticks", &self.modem.clock.ticks)
            .field("active", &self.st.active)
            .finish()
    }
}

/// Default ROM image: a deterministic filler with a prologue word at every
/// function address.
pub fn default_rom() -> Arc<Vec<u8>> {
    static ROM: OnceLock<Arc<Vec<u8>>> = OnceLock::new();
    ROM.get_or_init(|| {
        let mut rom = vec![0u8; ROM_LEN as usize];
        let mut x: u32 = 0x2545_f491;
        for w in rom.chunks_exact_mut(4) {
            x ^= x << 13;
            x ^= x >> 17;
            x ^= x << 5;
            w.copy_from_slice(&x.to_le_bytes());
        }
        let table = fn_table();
        for id in table.ids() {
            let a = table.addr(id) as usize;
            rom[a..a + 2].copy_from_slice(&0xb5f0u16.to_le_bytes());
        }
        Arc::new(rom)
    })
    .clone()
}

/// Bootcheck contents written by every hard boot.
pub fn fresh_bootcheck() -> [u8; BOOTCHECK_LEN as usize] {
    let mut b = [0u8; BOOTCHECK_LEN as usize];
    b[0..4].copy_from_slice(&BOOT_MAGIC.to_le_bytes());
    b[4..8].copy_from_slice(&(!BOOT_MAGIC).to_le_bytes());
    b[8..12].copy_from_slice(&(BOOT_MAGIC ^ 0x5a5a_5a5a).to_le_bytes());
    b[12..16].copy_from_slice(b"BOOT");
    b
}

const LMP_TX_SCRATCH: u32 = 0x201700;
const UART_TX_SCRATCH: u32 = 0x201800;
const UART_TX_LEN: u32 = 0x800;
const NVRAM_SCRATCH: u32 = 0x202000;
const AIR_LOG_CAP: usize = 256;
const AIR_TX_CAP: usize = 32;
const SCHED_EVENT_LIMIT: u32 = 100_000;

fn entry_block(f: FnId) -> Option<u16> {
    match f {
        f::MEMCPY => Some(b::MEMCPY_ENTRY),
        f::ALLOC_OR_DIE | f::ALLOC_OR_NULL => Some(b::ALLOC_ENTRY),
        f::SPECIAL_ALLOC => Some(b::SPECIAL_ALLOC_ENTRY),
        f::RELEASE => Some(b::RELEASE_ENTRY),
        _ => None,
    }
}

fn sanitizer_trigger(block: u16) -> Option<Trigger> {
    match block {
        b::MEMCPY_EXIT => Some(Trigger::OnCopy),
        b::RELEASE_ENTRY => Some(Trigger::OnRelease),
        b::ALLOC_ENTRY | b::SPECIAL_ALLOC_ENTRY => Some(Trigger::OnAlloc),
        _ => None,
    }
}

impl Firmware {
    /// Hard boot of the default image.
    pub fn boot(profile: FirmwareProfile, seed: u64) -> Result<Firmware, FwError> {
        Self::build(profile, seed, default_rom(), None)
    }

    /// Hard boot from a snapshot. The manifest must declare the standard
    /// layout; the ROM blob replaces the default image and RAM is initialized
    /// by the boot sequence.
    pub fn boot_from_snapshot(
        manifest: &SnapshotManifest,
        blobs: &BTreeMap<String, Vec<u8>>,
        profile: FirmwareProfile,
        seed: u64,
    ) -> Result<Firmware, FwError> {
        let loaded = load_snapshot(manifest, blobs)?;
        let reference = AddressSpace::with_segments(segments())?;
        if !loaded.same_layout(&reference) {
            return Err(LayoutError::Missing("standard controller layout".into()).into());
        }
        let rom = loaded.rom_handle("rom").ok_or_else(|| LayoutError::Missing("rom".into()))?;
        Self::build(profile, seed, rom, None)
    }

    fn build(
        profile: FirmwareProfile,
        seed: u64,
        rom: Arc<Vec<u8>>,
        persist: Option<Persist>,
    ) -> Result<Firmware, FwError> {
        profile.validate().map_err(FwError::Profile)?;
        let mut space = AddressSpace::with_segments(segments())?;
        space.load_rom("rom", rom.clone())?;
        let wifi = persist.as_ref().map_or(WifiState::Ok, |p| p.wifi);
        space.attach_mmio("coex", Box::new(CoexDevice::new(wifi)))?;

        let lm = BlocPool::create(&mut space, LM_POOL, LM_POOL_START, LM_POOL_SIZE, LM_POOL_CAP)?;
        let event = BlocPool::create(&mut space, EVENT_POOL, EVENT_POOL_START, EVENT_POOL_SIZE, EVENT_POOL_CAP)?;
        let acl =
            BlocPool::create(&mut space, ACL_POOL, ACL_POOL_START, profile.acl_internal_len as u32, ACL_POOL_CAP)?;
        let ble_rx = BlocPool::create(
            &mut space,
            BLE_RX_POOL,
            BLE_POOL_START,
            profile.ble_pool_size,
            profile.ble_pool_capacity,
        )?;
        let canary = profile.s10_canary;
        let pools = Pools {
            lm: lm.with_canary(canary),
            event: event.with_canary(canary),
            acl: acl.with_canary(canary),
            ble_rx: ble_rx.with_canary(canary),
        };

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bd = [0u8; 6];
        rng.fill_bytes(&mut bd);
        let mut pool = [0u8; RAND_POOL_LEN as usize];
        rng.fill_bytes(&mut pool);
        space.write_bytes(BD_ADDR, &bd)?;
        space.write_bytes(RAND_POOL, &pool)?;
        let mut name = [0u8; DEVICE_NAME_LEN as usize];
        name[..16].copy_from_slice(b"btfuzz-synthetic");
        space.write_bytes(DEVICE_NAME, &name)?;
        space.write_u16(ACL_CONFIG, profile.acl_signaled_len)?;
        space.write_u16(ACL_CONFIG + 2, profile.acl_signaled_pkts)?;
        space.write_u16(ACL_CONFIG + 4, profile.acl_internal_len)?;
        space.write_bytes(BOOTCHECK, &fresh_bootcheck())?;

        let (hooks, instr, tracing, nvram, bricked, hci_out) = match persist {
            Some(p) => (p.hooks, p.instr, p.tracing, p.nvram, p.bricked, p.hci_out),
            None => {
                let mut hooks = HookRegistry::new(fn_table(), profile.patchram_slots);
                for f in [f::CONTEXT_SWITCH, f::TIMER_ISR, f::UART_SEND, f::UART_RECV] {
                    hooks.install_system(HookPoint::new(f))?;
                }
                (hooks, Instr::default(), false, BTreeMap::new(), false, Vec::new())
            }
        };

        let st = FwState {
            lm_q: VecDeque::new(),
            bt_q: VecDeque::new(),
            thread: Thread::Idle,
            enabled: Task::Inquiry.bit(),
            active: Task::Inquiry,
            rx: None,
            conns: Default::default(),
            le: None,
            timers: Vec::new(),
            timer_seq: 0,
            uart: UartRx::default(),
            air_tx: VecDeque::new(),
            paging: None,
            scan_enabled: false,
            rng,
            counters: Counters::default(),
            link_key_requested_ns: None,
            link_key_reply_ns: None,
        };
        let mut modem = Modem::new();
        modem.stop_on_exhaust = false;
        let mut fw = Firmware {
            space,
            st,
            hooks,
            modem,
            injector: Injector::new(),
            profile,
            seed,
            rom,
            pools,
            cov: Coverage::new(),
            blocks_executed: 0,
            instr,
            regs: [0; 16],
            stack: Vec::with_capacity(16),
            halt_site: None,
            tracing,
            nvram,
            bricked,
            hci_out,
            air_log: Vec::new(),
        };
        fw.cov(b::BOOT_ENTRY)?;
        fw.cov(b::BOOT_HARD)?;
        fw.cov(b::BOOT_POOLS)?;
        Ok(fw)
    }

    /// Booted instance with one classic link, one LE link and inquiry scan
    /// enabled, sanitizer on. This is the state fuzz cases start from.
    pub fn fuzz_target(profile: FirmwareProfile, seed: u64) -> Result<Firmware, FwError> {
        let mut fw = Self::boot(profile, seed)?;
        let mut peer = [0u8; 6];
        fw.st.rng.fill_bytes(&mut peer);
        fw.establish_connection(peer)?;
        let init = fw.st.rng.next_u32() & 0xff_ffff;
        fw.establish_le(init);
        fw.activate_task(Task::Acl);
        fw.enable_sanitizer()?;
        fw.clear_outputs();
        Ok(fw)
    }

    // ---- accessors -------------------------------------------------------

    pub fn profile(&self) -> &FirmwareProfile {
        &self.profile
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn pools(&self) -> Pools {
        self.pools
    }

    pub fn hooks(&self) -> &HookRegistry {
        &self.hooks
    }

    pub fn hooks_mut(&mut self) -> &mut HookRegistry {
        &mut self.hooks
    }

    pub fn install_hook(&mut self, hook: HookPoint) -> Result<HookHandle, HookError> {
        self.hooks.install(hook)
    }

    pub fn coverage(&self) -> &Coverage {
        &self.cov
    }

    pub fn blocks_executed(&self) -> u64 {
        self.blocks_executed
    }

    pub fn counters(&self) -> Counters {
        self.st.counters
    }

    pub fn ticks(&self) -> u64 {
        self.modem.clock.ticks
    }

    pub fn now_ns(&self) -> u64 {
        self.modem.clock.nanos()
    }

    pub fn active_task(&self) -> Task {
        self.st.active
    }

    pub fn task_enabled(&self, t: Task) -> bool {
        self.st.enabled & t.bit() != 0
    }

    pub fn connections(&self) -> impl Iterator<Item = (u8, &Conn)> {
        self.st.conns.iter().enumerate().filter_map(|(i, c)| c.as_ref().map(|c| (i as u8, c)))
    }

    pub fn connection(&self, link: u8) -> Option<&Conn> {
        self.st.conns.get(link as usize).and_then(|c| c.as_ref())
    }

    pub fn le_connection(&self) -> Option<LeConn> {
        self.st.le
    }

    pub fn bd_addr(&self) -> [u8; 6] {
        let mut a = [0u8; 6];
        self.space.read_into(BD_ADDR, &mut a).expect("bd_addr lies in RAM");
        a
    }

    pub fn bootcheck(&self) -> [u8; BOOTCHECK_LEN as usize] {
        let mut b = [0u8; BOOTCHECK_LEN as usize];
        self.space.read_into(BOOTCHECK, &mut b).expect("bootcheck lies in RAM");
        b
    }

    pub fn wifi_state(&self) -> WifiState {
        self.space.mmio_device::<CoexDevice>("coex").map_or(WifiState::Ok, |d| d.state)
    }

    pub fn is_bricked(&self) -> bool {
        self.bricked
    }

    pub fn nvram(&self) -> &BTreeMap<u16, Vec<u8>> {
        &self.nvram
    }

    pub fn pending_timers(&self) -> usize {
        self.st.timers.len()
    }

    pub fn queues_idle(&self) -> bool {
        self.st.lm_q.is_empty() && self.st.bt_q.is_empty()
    }

    /// Name of the innermost non-utility function active at the first halt.
    pub fn halt_handler(&self) -> Option<&str> {
        self.halt_site.map(|f| self.hooks.table().name(f))
    }

    pub fn set_tracing(&mut self, on: bool) {
        self.tracing = on;
    }

    pub fn trace(&self) -> &[TraceLine] {
        self.hooks.trace()
    }

    pub fn take_trace(&mut self) -> Vec<TraceLine> {
        self.hooks.take_trace()
    }

    /// Bytes the controller sent to the host (H4 framed).
    pub fn hci_output(&self) -> &[u8] {
        &self.hci_out
    }

    pub fn take_hci_output(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.hci_out)
    }

    /// PDUs transmitted over the air, oldest first.
    pub fn air_log(&self) -> &[Vec<u8>] {
        &self.air_log
    }

    pub fn clear_outputs(&mut self) {
        self.hci_out.clear();
        self.air_log.clear();
        self.hooks.take_trace();
    }

    pub fn reset_coverage(&mut self) {
        self.cov.clear();
        self.blocks_executed = 0;
    }

    /// Link-key request and reply instants in simulated nanoseconds.
    pub fn link_key_timing(&self) -> (Option<u64>, Option<u64>) {
        (self.st.link_key_requested_ns, self.st.link_key_reply_ns)
    }

    // ---- instrumentation -------------------------------------------------

    pub fn instrumentation_mode(&self) -> InstrumentationMode {
        self.instr.mode
    }

    pub fn set_campaign_active(&mut self, on: bool) {
        self.instr.campaign_active = on;
    }

    pub fn set_instrumentation_mode(&mut self, mode: InstrumentationMode) -> Result<(), FwError> {
        if self.instr.campaign_active {
            return Err(StateError.into());
        }
        if mode == self.instr.mode {
            return Ok(());
        }
        let san = self.instr.sanitizer;
        if san {
            self.disable_sanitizer()?;
        }
        self.instr.mode = mode;
        if san {
            self.enable_sanitizer()?;
        }
        Ok(())
    }

    /// Generic per-block callback; only invoked in per-event-callback mode.
    pub fn set_block_callback(&mut self, cb: Option<BlockCallback>) {
        self.instr.user_cb = cb;
    }

    pub fn sanitizer_enabled(&self) -> bool {
        self.instr.sanitizer
    }

    /// Installs the free-list checks: after every copy, before every release
    /// and before every allocation.
    pub fn enable_sanitizer(&mut self) -> Result<(), FwError> {
        if self.instr.sanitizer {
            return Ok(());
        }
        let pools = self.pools.all();
        match self.instr.mode {
            InstrumentationMode::Inline => {
                let check = move |t: Trigger| {
                    move |ctx: &mut crate::hooks::HookCtx<'_>| match sanitize_pools(&pools, ctx.space, t) {
                        Some(r) => HookFlow::Halt(Halt::Sanitizer(r)),
                        None => HookFlow::Continue,
                    }
                };
                let points = [
                    HookPoint::new(f::MEMCPY).post(check(Trigger::OnCopy)),
                    HookPoint::new(f::RELEASE).pre(check(Trigger::OnRelease)),
                    HookPoint::new(f::ALLOC_OR_DIE).pre(check(Trigger::OnAlloc)),
                    HookPoint::new(f::ALLOC_OR_NULL).pre(check(Trigger::OnAlloc)),
                    HookPoint::new(f::SPECIAL_ALLOC).pre(check(Trigger::OnAlloc)),
                ];
                let mut handles = Vec::new();
                for p in points {
                    match self.hooks.install_system(p) {
                        Ok(h) => handles.push(h),
                        Err(e) => {
                            for h in handles {
                                let _ = self.hooks.uninstall(h);
                            }
                            return Err(e.into());
                        }
                    }
                }
                self.instr.sanitizer_hooks = handles;
            }
            InstrumentationMode::PerEventCallback => {
                let cb: BlockCallback = Arc::new(move |ev: &BlockEvent, mem: &dyn crate::hooks::MemoryView| {
                    let t = sanitizer_trigger(block_of_pc(ev.pc)?)?;
                    pools.iter().find_map(|p| p.sanitize_with(|a| mem.mem_read_u32(a), t).err()).map(Halt::Sanitizer)
                });
                self.instr.block_sanitizer = Some(cb);
            }
        }
        self.instr.sanitizer = true;
        Ok(())
    }

    pub fn disable_sanitizer(&mut self) -> Result<(), FwError> {
        for h in std::mem::take(&mut self.instr.sanitizer_hooks) {
            self.hooks.uninstall(h)?;
        }
        self.instr.block_sanitizer = None;
        self.instr.sanitizer = false;
        Ok(())
    }

    /// Explicit check of all pools.
    pub fn sanitize(&self) -> Option<SanitizerReport> {
        sanitize_pools(&self.pools.all(), &self.space, Trigger::Explicit)
    }

    // ---- execution core --------------------------------------------------

    #[inline]
    fn cov(&mut self, block: u16) -> Result<(), Halt> {
        self.cov.insert(block);
        self.blocks_executed += 1;
        if self.instr.mode == InstrumentationMode::PerEventCallback {
            self.block_event(block)?;
        }
        Ok(())
    }

    #[cold]
    fn block_event(&mut self, block: u16) -> Result<(), Halt> {
        let ev = BlockEvent { block, pc: b::pc(block), regs: self.regs };
        if let Some(cb) = &self.instr.block_sanitizer {
            if let Some(h) = cb(&ev, &self.space) {
                return Err(h);
            }
        }
        if let Some(cb) = &self.instr.user_cb {
            if let Some(h) = cb(&ev, &self.space) {
                return Err(h);
            }
        }
        Ok(())
    }

    fn lr_for(&self, callee: FnId) -> u32 {
        let base = match self.stack.last() {
            Some(&caller) => self.hooks.table().addr(caller),
            None => 0x05_4a00,
        };
        base + 0x20 + ((callee.0 as u32 * 6) & 0xfe) + 1
    }

    /// Calls a firmware function. Hooks on `f` run around the original body.
    pub fn call(&mut self, f: FnId, args: &[u32]) -> Result<u32, Halt> {
        let mut a = [0u32; 4];
        let n = args.len().min(4);
        a[..n].copy_from_slice(&args[..n]);
        let lr = self.lr_for(f);
        self.regs[..4].copy_from_slice(&a);
        self.regs[14] = lr;
        self.regs[15] = self.hooks.table().addr(f);
        self.stack.push(f);
        let r = self.call_inner(f, &mut a[..n], lr);
        if r.is_err() && self.halt_site.is_none() {
            self.halt_site = self.stack.iter().rev().copied().find(|&g| !f::is_utility(g)).or(Some(f));
        }
        self.stack.pop();
        r
    }

    fn call_inner(&mut self, f: FnId, args: &mut [u32], lr: u32) -> Result<u32, Halt> {
        if let Some(b) = entry_block(f) {
            self.cov(b)?;
        }
        if !self.hooks.is_hooked(f) || self.hooks.in_flight(f) {
            return self.dispatch(f, args);
        }
        let point = self.hooks.take_for_call(f).expect("hooked");
        let r = self.run_hooked(&point, f, args, lr);
        self.hooks.restore_after_call(point);
        r
    }

    fn run_hooked(&mut self, point: &HookPoint, f: FnId, args: &mut [u32], lr: u32) -> Result<u32, Halt> {
        let returns = self.hooks.table().returns(f);
        let slot = if point.trace {
            let ev = TraceEvent {
                caller_lr: lr,
                fn_name: self.hooks.table().name(f).to_string(),
                args: args.to_vec(),
                ret: None,
            };
            self.hooks.record_call(ev)
        } else {
            None
        };
        if let Some(pre) = &point.pre {
            let mut ctx = crate::hooks::HookCtx { lr, fn_id: f, args: &mut *args, ret: None, space: &mut self.space };
            if let HookFlow::Halt(h) = pre(&mut ctx) {
                return Err(h);
            }
        }
        let ret = self.dispatch(f, args)?;
        let mut ret_opt = returns.then_some(ret);
        if let Some(post) = &point.post {
            let mut ctx =
                crate::hooks::HookCtx { lr, fn_id: f, args: &mut *args, ret: ret_opt, space: &mut self.space };
            let flow = post(&mut ctx);
            ret_opt = if returns { ctx.ret } else { None };
            if let HookFlow::Halt(h) = flow {
                return Err(h);
            }
        }
        if let Some(i) = slot {
            self.hooks.set_trace_ret(i, ret_opt);
        }
        Ok(ret_opt.unwrap_or(ret))
    }

    fn dispatch(&mut self, id: FnId, a: &mut [u32]) -> Result<u32, Halt> {
        let arg = |i: usize| a.get(i).copied().unwrap_or(0);
        match id {
            f::MEMCPY => self.fn_memcpy8(arg(0), arg(1), arg(2)).map(|_| 0),
            f::ALLOC_OR_DIE => self.fn_alloc(arg(0), crate::heap::AllocMode::OrDie),
            f::ALLOC_OR_NULL => self.fn_alloc(arg(0), crate::heap::AllocMode::OrNull),
            f::SPECIAL_ALLOC => self.fn_special_alloc(arg(0)),
            f::RELEASE => self.fn_release(arg(0)).map(|_| 0),
            f::ACL_ALLOC_UP => self.fn_acl_alloc_up(arg(0)),
            f::ACL_ALLOC_RX => self.fn_acl_alloc_rx(arg(0)),
            f::CONTEXT_SWITCH => self.fn_context_switch(arg(0), arg(1)).map(|_| 0),
            f::TIMER_ISR => self.cov(b::TIMER_FIRE).map(|_| 0),
            f::UART_SEND => self.fn_uart_send(arg(0), arg(1)).map(|_| 0),
            f::UART_RECV => self.fn_uart_recv().map(|_| 0),
            f::BCS_ISR => self.fn_bcs_isr(arg(0), arg(1), arg(2), arg(3)).map(|_| 0),
            f::BCS_RX_HDR => self.fn_bcs_rx_hdr(arg(0) as u16, arg(1) as u16).map(|_| 0),
            f::BCS_RX_DONE => self.fn_bcs_rx_done(arg(0) != 0).map(|_| 0),
            f::BCS_TX_DONE => self.fn_bcs_tx_done().map(|_| 0),
            f::BCS_SLOT11 => self.fn_bcs_slot11().map(|_| 0),
            f::EIR_RX => self.fn_eir_rx(arg(0) as u16).map(|_| 0),
            f::BLE_RX => self.fn_ble_rx(arg(0) as u16).map(|_| 0),
            f::BLE_LL_CTRL => self.fn_ble_ll_ctrl(arg(0), arg(1)).map(|_| 0),
            f::ACL_RX => self.fn_acl_rx(arg(0) as u16, arg(1) as u16).map(|_| 0),
            f::SCO_RX => self.cov(b::SCO_ENTRY).map(|_| 0),
            f::PAGING_RX => self.fn_paging_rx().map(|_| 0),
            f::ADV_RX => self.fn_adv_rx(arg(0) as u16).map(|_| 0),
            f::LMP_DISPATCH => self.fn_lmp_dispatch(arg(0)).map(|_| 0),
            f::LM_SEND_LMP => self.fn_lm_send_lmp(arg(0), arg(1), arg(2)).map(|_| 0),
            f::LM_SETUP_FINALIZE => self.fn_setup_finalize(arg(0) as u8).map(|_| 0),
            f::HCI_CMD => self.fn_hci_cmd(arg(0)).map(|_| 0),
            f::HCI_SEND_EVENT => self.fn_hci_send_event(arg(0)).map(|_| 0),
            f::BT_SEND_ACL => self.fn_bt_send_acl(arg(0), arg(1), arg(2), arg(3) as u16).map(|_| 0),
            f::NAME_COMPLETE => self.fn_name_complete(arg(0) as u8).map(|_| 0),
            f::NAME_TIMEOUT => self.fn_name_timeout(arg(0) as u8, arg(1)).map(|_| 0),
            f::LINK_KEY_REQUEST => self.fn_link_key_request(arg(0)).map(|_| 0),
            f::LINK_KEY_REPLY => self.fn_link_key_reply(arg(0)),
            f::LINK_KEY_NEG => self.fn_link_key_neg(arg(0)),
            f::NVRAM_WRITE => self.fn_nvram_write(arg(0) as u16, arg(1), arg(2)).map(|_| 0),
            f::HAL_NVRAM_WRITE => self.fn_hal_nvram_write(arg(0) as u16, arg(1), arg(2)),
            f::COEX_WRITE => self.fn_coex_write(arg(0), arg(1) as u8).map(|_| 0),
            f::SOFT_RESET => self.fn_soft_reset().map(|_| 0),
            FnId(x) if (f::LMP_OP_BASE..f::LMP_EXT_BASE).contains(&x) => {
                self.fn_lmp_op((x - f::LMP_OP_BASE) as u8, arg(0), arg(1) as usize).map(|_| 0)
            }
            FnId(x) if (f::LMP_EXT_BASE..f::COUNT).contains(&x) => {
                self.fn_lmp_ext_op((x - f::LMP_EXT_BASE) as u8, arg(0), arg(1) as usize).map(|_| 0)
            }
            FnId(x) => Err(FirmwareAbort::Assert { reason: format!("call to unknown function {x}") }.into()),
        }
    }

    // ---- primitives ------------------------------------------------------

    fn fn_memcpy8(&mut self, dst: u32, src: u32, len: u32) -> Result<(), Halt> {
        let mut off = 0u32;
        let mut chunk = [0u8; 8];
        while len - off >= 8 {
            self.cov(b::MEMCPY_LOOP)?;
            self.space.read_into(src.wrapping_add(off), &mut chunk)?;
            self.space.write_bytes(dst.wrapping_add(off), &chunk)?;
            off += 8;
        }
        if off < len {
            self.cov(b::MEMCPY_TAIL)?;
            let n = (len - off) as usize;
            self.space.read_into(src.wrapping_add(off), &mut chunk[..n])?;
            self.space.write_bytes(dst.wrapping_add(off), &chunk[..n])?;
        }
        self.cov(b::MEMCPY_EXIT)
    }

    fn fn_alloc(&mut self, size: u32, mode: crate::heap::AllocMode) -> Result<u32, Halt> {
        let Some(pool) = self.pools.general().into_iter().find(|p| p.size >= size) else {
            self.cov(b::ALLOC_TOO_BIG)?;
            return match mode {
                crate::heap::AllocMode::OrNull => Ok(0),
                crate::heap::AllocMode::OrDie => {
                    Err(FirmwareAbort::Assert { reason: format!("no pool serves {size} bytes") }.into())
                }
            };
        };
        let lr = self.regs[14];
        match pool.allocate_tagged(&mut self.space, mode, lr)? {
            Some(p) => Ok(p),
            None => {
                self.cov(b::ALLOC_NULL)?;
                Ok(0)
            }
        }
    }

    fn fn_special_alloc(&mut self, pool_addr: u32) -> Result<u32, Halt> {
        let Some(pool) = self.pools.all().into_iter().find(|p| p.pool_addr == pool_addr) else {
            return Err(FirmwareAbort::Assert { reason: format!("no pool at 0x{pool_addr:x}") }.into());
        };
        let lr = self.regs[14];
        match pool.allocate_tagged(&mut self.space, crate::heap::AllocMode::OrNull, lr)? {
            Some(p) => Ok(p),
            None => {
                self.cov(b::ALLOC_NULL)?;
                Ok(0)
            }
        }
    }

    fn fn_release(&mut self, ptr: u32) -> Result<(), Halt> {
        let hdr = ptr.wrapping_sub(crate::heap::HEADER_LEN);
        let Some(pool) = self.pools.all().into_iter().find(|p| p.contains(hdr)) else {
            self.cov(b::RELEASE_FOREIGN)?;
            return Err(FirmwareAbort::ForeignRelease { addr: ptr }.into());
        };
        pool.release(&mut self.space, ptr)?;
        Ok(())
    }

    fn fn_acl_alloc_up(&mut self, size: u32) -> Result<u32, Halt> {
        self.cov(b::ACL_UP_ENTRY)?;
        let p = self.call(f::SPECIAL_ALLOC, &[BLE_RX_POOL])?;
        if p != 0 {
            let handle = self.st.le.map_or(0, |l| l.handle);
            let mut h = [0u8; BLE_RX_HDR as usize];
            h[0..2].copy_from_slice(&handle.to_le_bytes());
            h[4..8].copy_from_slice(&size.to_le_bytes());
            self.space.write_bytes(p, &h)?;
        }
        Ok(p)
    }

    fn fn_acl_alloc_rx(&mut self, _len: u32) -> Result<u32, Halt> {
        self.call(f::SPECIAL_ALLOC, &[ACL_POOL])
    }

    fn fn_context_switch(&mut self, from: u32, to: u32) -> Result<(), Halt> {
        self.cov(b::SCHED_SWITCH)?;
        let (from, to) = (Thread::from_u32(from), Thread::from_u32(to));
        if self.tracing {
            self.hooks.record(TraceLine::ContextSwitch { from: from.name().into(), to: to.name().into() });
        }
        self.st.thread = to;
        self.cov(match to {
            Thread::Idle => b::SCHED_IDLE,
            Thread::Lm => b::SCHED_LM,
            Thread::BtTransport => b::SCHED_BT,
        })
    }

    fn switch_to(&mut self, to: Thread) -> Result<(), Halt> {
        let from = self.st.thread;
        self.call(f::CONTEXT_SWITCH, &[from as u32, to as u32]).map(|_| ())
    }

    // ---- scheduler -------------------------------------------------------

    /// Drains all thread queues. Threads are visited round-robin (lm, then
    /// bttransport); a visited thread processes its whole queue.
    pub fn run_until_idle(&mut self) -> Result<StepSummary, Halt> {
        let mut s = StepSummary::default();
        const ORDER: [Thread; 2] = [Thread::Lm, Thread::BtTransport];
        loop {
            let start = if self.st.thread == Thread::Lm { 1 } else { 0 };
            let next = (0..2).map(|k| ORDER[(start + k) % 2]).find(|t| match t {
                Thread::Lm => !self.st.lm_q.is_empty(),
                Thread::BtTransport => !self.st.bt_q.is_empty(),
                Thread::Idle => false,
            });
            let Some(t) = next else { break };
            if t != self.st.thread {
                self.switch_to(t)?;
                s.context_switches += 1;
            }
            match t {
                Thread::Lm => {
                    while let Some(m) = self.st.lm_q.pop_front() {
                        s.lm_events += 1;
                        self.handle_lm(m)?;
                        if s.lm_events > SCHED_EVENT_LIMIT {
                            return Err(FirmwareAbort::Assert { reason: "lm queue livelock".into() }.into());
                        }
                    }
                }
                Thread::BtTransport => {
                    while let Some(m) = self.st.bt_q.pop_front() {
                        s.bt_events += 1;
                        self.handle_bt(m)?;
                        if s.bt_events > SCHED_EVENT_LIMIT {
                            return Err(FirmwareAbort::Assert { reason: "bttransport queue livelock".into() }.into());
                        }
                    }
                }
                Thread::Idle => unreachable!(),
            }
        }
        if self.st.thread != Thread::Idle {
            self.switch_to(Thread::Idle)?;
            s.context_switches += 1;
        }
        Ok(s)
    }

    fn add_timer(&mut self, delay_ns: u64, kind: TimerKind) {
        let deadline = self.now_ns().saturating_add(delay_ns);
        self.st.timer_seq += 1;
        let t = Timer { deadline, seq: self.st.timer_seq, kind };
        let pos = self.st.timers.partition_point(|x| (x.deadline, x.seq) <= (t.deadline, t.seq));
        self.st.timers.insert(pos, t);
    }

    fn fire_timers(&mut self) -> Result<(), Halt> {
        let now = self.now_ns();
        while self.st.timers.first().is_some_and(|t| t.deadline <= now) {
            let t = self.st.timers.remove(0);
            self.st.counters.timers_fired += 1;
            self.call(f::TIMER_ISR, &[t.kind.code()])?;
            match t.kind {
                TimerKind::UartDelivery(bytes) => self.st.bt_q.push_back(BtMsg::UartRx(bytes)),
                k => self.st.lm_q.push_back(LmMsg::Timer(k)),
            }
        }
        Ok(())
    }

    // ---- ticks -----------------------------------------------------------

    /// One half-slot: modem phase, BCS interrupt, timers, then threads.
    /// Returns `Ok(false)` when the byte source is exhausted.
    fn step(&mut self, ext: Option<&mut dyn ByteSource>) -> Result<bool, Halt> {
        let ev = match ext {
            Some(src) => self.modem.tick(src),
            None => self.modem.tick(&mut self.injector),
        };
        let ev = match ev {
            Ok(ev) => ev,
            Err(_) => return Ok(false),
        };
        let flags = ev.flags;
        let (log, hdr, valid) = (ev.pkt_log, ev.pkt_hdr_status, ev.rx_valid);
        if ev.rx_len > 0 {
            let frame = self.st.rx.map_or(0, |r| r.frame);
            let off = frame * RX_CHUNK as u32;
            if off + RX_CHUNK as u32 <= DMA_RX_LEN {
                self.space.write_bytes(DMA_RX_BUF + off, &ev.rx_payload)?;
            }
        }
        if self.bricked {
            return Ok(true);
        }
        self.call(f::BCS_ISR, &[flags.bits() as u32, log as u32, hdr as u32, valid as u32])?;
        self.fire_timers()?;
        if !self.queues_idle() {
            self.run_until_idle()?;
        }
        Ok(true)
    }

    /// Single tick over the internal injector.
    pub fn tick(&mut self) -> Result<PhyFlags, Halt> {
        self.step(None)?;
        Ok(self.modem.event().flags)
    }

    pub fn inject(&mut self, p: &crate::modem::AirPacket) {
        self.injector.push(p);
    }

    pub fn inject_raw(&mut self, bytes: &[u8]) {
        self.injector.push_raw(bytes);
    }

    fn settled(&self) -> bool {
        self.injector.is_empty() && !self.modem.mid_pair() && self.st.rx.is_none() && self.queues_idle()
    }

    /// Runs until injected input has been consumed and processed, or
    /// `max_ticks` elapsed.
    pub fn run_injected(&mut self, max_ticks: u64) -> Result<RunReport, Halt> {
        let mut ticks = 0;
        while !self.settled() {
            if ticks >= max_ticks {
                return Ok(RunReport { end: RunEnd::TickBudget, ticks });
            }
            self.step(None)?;
            ticks += 1;
        }
        Ok(RunReport { end: RunEnd::Idle, ticks })
    }

    /// Feeds an external byte source until it is exhausted or `max_ticks`.
    pub fn run_source(&mut self, src: &mut dyn ByteSource, max_ticks: u64) -> Result<RunReport, Halt> {
        let prev = self.modem.stop_on_exhaust;
        self.modem.stop_on_exhaust = true;
        let mut ticks = 0;
        let r = loop {
            if ticks >= max_ticks {
                break Ok(RunReport { end: RunEnd::TickBudget, ticks });
            }
            match self.step(Some(&mut *src)) {
                Ok(true) => ticks += 1,
                Ok(false) => break Ok(RunReport { end: RunEnd::Exhausted, ticks }),
                Err(h) => break Err(h),
            }
        };
        self.modem.stop_on_exhaust = prev;
        r
    }

    /// Lets simulated time pass with an idle radio.
    pub fn advance_time(&mut self, ns: u64) -> Result<(), Halt> {
        let ticks = ns.div_ceil(crate::modem::TICK_NS);
        for _ in 0..ticks {
            self.step(None)?;
        }
        Ok(())
    }

    // ---- snapshot restore --------------------------------------------------

    /// Rolls back to `reference` (a clone taken earlier). RAM is restored by
    /// dirty page; hooks installed on `self` are kept.
    pub fn restore_from(&mut self, reference: &Firmware) {
        self.space.restore_from(&reference.space);
        self.st.clone_from(&reference.st);
        self.modem.clone_from(&reference.modem);
        self.injector.clear();
        self.cov.clear();
        self.blocks_executed = 0;
        self.stack.clear();
        self.halt_site = None;
        self.regs = reference.regs;
        self.nvram.clone_from(&reference.nvram);
        self.bricked = reference.bricked;
        self.hci_out.clear();
        self.air_log.clear();
        self.hooks.take_trace();
    }

    pub fn save_snapshot(&self) -> (SnapshotManifest, BTreeMap<String, Vec<u8>>) {
        let table = self.hooks.table().clone();
        let mut symbols: BTreeMap<String, u32> =
            table.ids().map(|id| (table.name(id).to_string(), table.addr(id))).collect();
        for (name, addr) in [
            ("bootcheck", BOOTCHECK),
            ("bd_addr", BD_ADDR),
            ("device_name", DEVICE_NAME),
            ("dma_rx_buffer", DMA_RX_BUF),
            ("lm_pool", LM_POOL),
            ("event_pool", EVENT_POOL),
            ("acl_pool", ACL_POOL),
            ("ble_rx_pool", BLE_RX_POOL),
        ] {
            symbols.insert(name.to_string(), addr);
        }
        save_snapshot(&self.space, Some("bcs_isr"), &symbols)
    }

    pub fn rom(&self) -> &Arc<Vec<u8>> {
        &self.rom
    }

    // ---- connections and tasks ---------------------------------------------

    pub fn activate_task(&mut self, t: Task) {
        self.st.enabled |= t.bit();
        self.st.active = t;
    }

    fn enable_task(&mut self, t: Task) {
        self.st.enabled |= t.bit();
    }

    fn disable_task(&mut self, t: Task) {
        self.st.enabled &= !t.bit();
        if self.st.active == t {
            let next = [Task::Acl, Task::LeConn, Task::Inquiry]
                .into_iter()
                .find(|&x| self.st.enabled & x.bit() != 0)
                .unwrap_or(Task::Inquiry);
            self.activate_task(next);
        }
    }

    /// Creates a classic connection context directly (no paging).
    pub fn establish_connection(&mut self, addr: [u8; 6]) -> Result<u8, FwError> {
        self.add_conn(addr)?.ok_or(FwError::NoConnection(CONN_SLOTS as u8))
    }

    pub fn establish_le(&mut self, crc_init: u32) {
        self.st.le = Some(LeConn { crc_init: crc_init & 0xff_ffff, handle: 0x0040 });
        self.enable_task(Task::LeConn);
    }

    fn conn_mut(&mut self, link: u8) -> Option<&mut Conn> {
        self.st.conns.get_mut(link as usize).and_then(|c| c.as_mut())
    }

    fn link_by_addr(&self, addr: &[u8]) -> Option<u8> {
        self.connections().find(|(_, c)| c.addr[..] == addr[..6]).map(|(i, _)| i)
    }

    /// Stores a link key in a connection context, as a completed pairing
    /// would.
    pub fn set_link_key(&mut self, link: u8, key: [u8; 16]) -> Result<(), FwError> {
        self.conn_mut(link).ok_or(FwError::NoConnection(link))?.link_key = Some(key);
        Ok(())
    }

    // ---- host side ---------------------------------------------------------

    /// Bytes arriving on the UART from the host.
    pub fn uart_rx(&mut self, bytes: &[u8]) {
        if self.bricked || bytes.is_empty() {
            return;
        }
        self.st.bt_q.push_back(BtMsg::UartRx(bytes.to_vec()));
    }

    /// Delivers host bytes after a simulated delay.
    pub fn schedule_uart_rx(&mut self, delay_ns: u64, bytes: Vec<u8>) {
        if self.bricked || bytes.is_empty() {
            return;
        }
        self.add_timer(delay_ns, TimerKind::UartDelivery(bytes));
    }

    /// Sends one HCI command and processes it.
    pub fn hci_command(&mut self, opcode: u16, params: &[u8]) -> Result<(), FwError> {
        let mut pkt = vec![crate::hci::consts::H4_COMMAND];
        pkt.extend_from_slice(&opcode.to_le_bytes());
        pkt.push(params.len() as u8);
        pkt.extend_from_slice(params);
        self.uart_rx(&pkt);
        self.run_until_idle()?;
        Ok(())
    }

    // ---- direct operations -------------------------------------------------

    /// Places bytes into the DMA receive buffer as the radio would.
    pub fn load_rx_buffer(&mut self, bytes: &[u8]) -> Result<(), FwError> {
        let n = bytes.len().min(DMA_RX_LEN as usize);
        self.space.write_bytes(DMA_RX_BUF, &bytes[..n])?;
        Ok(())
    }

    fn require_task(&self, t: Task) -> Result<(), FwError> {
        if self.st.active != t {
            return Err(FwError::TaskInactive(t));
        }
        Ok(())
    }

    /// Extended inquiry response reception with the given payload header over
    /// `hw_buffer`. The hardware gap/duplication model is applied for the
    /// header's 10-bit length.
    pub fn on_eir(&mut self, header: PayloadHeader, hw_buffer: &[u8]) -> Result<(), FwError> {
        self.require_task(Task::Inquiry)?;
        self.load_rx_buffer(hw_buffer)?;
        let hdr = header.to_u16();
        self.hw_tail(header.length as u32, pkt_log(Task::Inquiry, 0), hdr)?;
        self.call(f::EIR_RX, &[hdr as u32])?;
        self.run_until_idle()?;
        Ok(())
    }

    /// BLE data PDU reception. The CRC is assumed valid, as checked by the
    /// radio.
    pub fn on_ble_pdu(&mut self, pdu: &[u8], crc: [u8; 3]) -> Result<(), FwError> {
        self.require_task(Task::LeConn)?;
        let len = pdu.len().min(255);
        let mut buf = pdu[..len].to_vec();
        buf.extend_from_slice(&crc);
        self.load_rx_buffer(&buf)?;
        let hdr = 0x02u16 | ((len as u16) << 8);
        self.call(f::BLE_RX, &[hdr as u32])?;
        self.run_until_idle()?;
        Ok(())
    }

    /// ACL data reception on link 0.
    pub fn on_acl(&mut self, payload: &[u8]) -> Result<(), FwError> {
        self.require_task(Task::Acl)?;
        if self.connection(0).is_none() {
            return Err(FwError::NoConnection(0));
        }
        let len = payload.len().min(0x3ff);
        self.load_rx_buffer(&payload[..len])?;
        let hdr = PayloadHeader { llid: 2, flow: true, length: len as u16, rfu: 0 }.to_u16();
        self.call(f::ACL_RX, &[hdr as u32, pkt_log(Task::Acl, 0) as u32])?;
        self.run_until_idle()?;
        Ok(())
    }

    /// Host-initiated remote name request on `link`, answered by the peer
    /// with `fragments` (14 name bytes each). With `omit_last` the final
    /// fragment never arrives and the buffer waits for the timeout. Returns
    /// the address of the name buffer.
    pub fn on_remote_name_flow(&mut self, link: u8, fragments: &[Vec<u8>], omit_last: bool) -> Result<u32, FwError> {
        let addr = self.connection(link).ok_or(FwError::NoConnection(link))?.addr;
        let mut params = addr.to_vec();
        params.extend_from_slice(&[0x01, 0x00, 0x00, 0x00]);
        self.hci_command(crate::hci::consts::OP_REMOTE_NAME_REQUEST, &params)?;
        let buf = self.connection(link).and_then(|c| c.name).map(|n| n.buf).ok_or(FwError::NoConnection(link))?;
        let total = (fragments.len() * 14).min(248) as u8;
        let send = if omit_last { fragments.len().saturating_sub(1) } else { fragments.len() };
        for (i, frag) in fragments.iter().take(send).enumerate() {
            let mut pdu = vec![lmp_byte0(LMP_NAME_RES, 1), (i * 14) as u8, total];
            let mut piece = [0u8; 14];
            let n = frag.len().min(14);
            piece[..n].copy_from_slice(&frag[..n]);
            pdu.extend_from_slice(&piece);
            self.inject(&air::lmp(link, &pdu));
            self.run_injected(1 << 16)?;
        }
        Ok(buf)
    }

    /// Firmware-side write into the coexistence register block.
    pub fn mmio_write(&mut self, addr: u32, value: u8) -> Result<(), FwError> {
        match self.space.segment_at(addr) {
            Some(s) if s.kind == SegmentKind::Mmio => {}
            _ => return Err(MemError::WriteDenied(addr).into()),
        }
        self.call(f::COEX_WRITE, &[addr, value as u32])?;
        Ok(())
    }

    fn fn_coex_write(&mut self, addr: u32, value: u8) -> Result<(), Halt> {
        self.cov(b::COEX_WRITE)?;
        self.space.write_u8(addr, value)?;
        Ok(())
    }

    /// NVRAM write either through the HAL (which guards low slots) or by
    /// calling the raw write function.
    pub fn nvram_write(&mut self, slot: u16, data: &[u8], via_hal: bool) -> Result<(), FwError> {
        let n = data.len().min(0x400);
        self.space.write_bytes(NVRAM_SCRATCH, &data[..n])?;
        let args = [slot as u32, NVRAM_SCRATCH, n as u32];
        if via_hal {
            if self.call(f::HAL_NVRAM_WRITE, &args)? != 0 {
                return Err(FwError::Guard { slot });
            }
        } else {
            self.call(f::NVRAM_WRITE, &args)?;
        }
        Ok(())
    }

    fn fn_hal_nvram_write(&mut self, slot: u16, ptr: u32, len: u32) -> Result<u32, Halt> {
        self.cov(b::NVRAM_HAL)?;
        if slot < 0x200 {
            self.cov(b::NVRAM_HAL_REJECT)?;
            return Ok(1);
        }
        self.call(f::NVRAM_WRITE, &[slot as u32, ptr, len])?;
        Ok(0)
    }

    fn fn_nvram_write(&mut self, slot: u16, ptr: u32, len: u32) -> Result<(), Halt> {
        self.cov(b::NVRAM_WRITE)?;
        let data = self.space.read_bytes(ptr, len as usize)?;
        self.nvram.insert(slot, data);
        if slot < 0x200 {
            self.cov(b::NVRAM_BRICK)?;
            self.bricked = true;
        }
        Ok(())
    }

    pub fn hci_reset(&mut self, kind: ResetKind) -> Result<(), FwError> {
        match kind {
            ResetKind::Soft => {
                if self.bricked {
                    return Err(FwError::Bricked);
                }
                self.hci_command(crate::hci::consts::OP_RESET, &[])
            }
            ResetKind::Hard => self.hard_reset(),
        }
    }

    fn fn_soft_reset(&mut self) -> Result<(), Halt> {
        self.cov(b::RESET_SOFT)?;
        let st = &mut self.st;
        st.timers.clear();
        st.conns = Default::default();
        st.le = None;
        st.lm_q.clear();
        st.paging = None;
        st.scan_enabled = false;
        st.rx = None;
        st.air_tx.clear();
        st.enabled = Task::Inquiry.bit();
        st.active = Task::Inquiry;
        Ok(())
    }

    /// Full re-boot. Hooks, instrumentation, NVRAM contents, the brick flag
    /// and the Wi-Fi core state outlive it.
    pub fn hard_reset(&mut self) -> Result<(), FwError> {
        let persist = Persist {
            hooks: self.hooks.clone(),
            instr: self.instr.clone(),
            tracing: self.tracing,
            nvram: std::mem::take(&mut self.nvram),
            bricked: self.bricked,
            wifi: self.wifi_state(),
            hci_out: std::mem::take(&mut self.hci_out),
        };
        *self = Self::build(self.profile.clone(), self.seed, self.rom.clone(), Some(persist))?;
        Ok(())
    }
}

fn block_of_pc(pc: u32) -> Option<u16> {
    let off = pc.checked_sub(b::pc(0))?;
    (off % 0x10 == 0).then_some((off / 0x10) as u16)
}

#[cfg(test)]
mod tests;
