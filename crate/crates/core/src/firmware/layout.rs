//! Memory map, function table and coverage block universe of the synthetic
//! controller.

use std::sync::{Arc, OnceLock};

use crate::hooks::{FnId, FnTable};
use crate::memory::Segment;

pub const ROM_BASE: u32 = 0x000000;
pub const ROM_LEN: u32 = 0x100000;
pub const RAM_BASE: u32 = 0x200000;
pub const RAM_LEN: u32 = 0x28000;
pub const SRAM_BASE: u32 = 0x300000;
pub const SRAM_LEN: u32 = 0x20000;
pub const HWBUF_BASE: u32 = 0x370000;
pub const HWBUF_LEN: u32 = 0x4000;
pub const COEX_BASE: u32 = 0x650000;
pub const COEX_LEN: u32 = 0x800;

/// DMA-mapped receive buffer.
pub const DMA_RX_BUF: u32 = 0x370c00;
pub const DMA_RX_LEN: u32 = 0x800;
/// Window in which the receive hardware leaves a duplicated payload suffix.
pub const HW_DUP_WINDOW: u32 = 512;

pub const BOOTCHECK: u32 = 0x200400;
pub const BOOTCHECK_LEN: u32 = 0x10;
pub const BOOT_MAGIC: u32 = 0xb007_c0de;
pub const BD_ADDR: u32 = 0x200500;
pub const DEVICE_NAME: u32 = 0x201000;
pub const DEVICE_NAME_LEN: u32 = 248;
pub const ACL_CONFIG: u32 = 0x201200;
pub const RAND_POOL: u32 = 0x201300;
pub const RAND_POOL_LEN: u32 = 32;
/// Per-link state mirrors (16 bytes each).
pub const LINK_TABLE: u32 = 0x201400;
pub const LINK_ENTRY_LEN: u32 = 0x40;

pub const LM_POOL: u32 = 0x20d35c;
pub const EVENT_POOL: u32 = 0x20d36c;
pub const ACL_POOL: u32 = 0x20d37c;
pub const BLE_RX_POOL: u32 = 0x20d38c;

pub const LM_POOL_START: u32 = 0x21fa48;
pub const LM_POOL_SIZE: u32 = 0x30;
pub const LM_POOL_CAP: u32 = 16;
pub const EVENT_POOL_START: u32 = 0x220200;
pub const EVENT_POOL_SIZE: u32 = 0x108;
pub const EVENT_POOL_CAP: u32 = 8;
pub const ACL_POOL_START: u32 = 0x220c00;
pub const ACL_POOL_CAP: u32 = 8;
pub const BLE_POOL_START: u32 = 0x2232c0;

/// Event buffer layout: link word, total length, H4 type, code, parameter
/// length, then up to 255 parameter bytes.
pub const EVT_OFF_LEN: u32 = 4;
pub const EVT_OFF_TYPE: u32 = 6;
pub const EVT_OFF_CODE: u32 = 7;
pub const EVT_OFF_PLEN: u32 = 8;
pub const EVT_OFF_PARAMS: u32 = 9;
pub const EVT_MAX_PARAMS: u32 = 255;

/// BLE receive buffers carry a 12-byte header before the PDU.
pub const BLE_RX_HDR: u32 = 12;

/// LM message buffers: link, length, PDU.
pub const LM_MSG_ALLOC: u32 = 0x2f;
pub const LMP_MAX_PDU: usize = 17;

pub const CONN_SLOTS: usize = 4;

pub fn segments() -> Vec<Segment> {
    vec![
        Segment::rom("rom", ROM_BASE, ROM_LEN),
        Segment::ram("ram", RAM_BASE, RAM_LEN),
        Segment::ram("sram", SRAM_BASE, SRAM_LEN),
        Segment::ram("hwbuf", HWBUF_BASE, HWBUF_LEN),
        Segment::mmio("coex", COEX_BASE, COEX_LEN),
    ]
}

macro_rules! id_table {
    ($ty:ident, $names:ident; $($id:ident = $name:literal),* $(,)?) => {
        #[allow(non_camel_case_types, clippy::upper_case_acronyms, dead_code)]
        #[repr(u16)]
        enum $ty { $($id),* }
        $(pub const $id: u16 = $ty::$id as u16;)*
        pub const $names: &[&str] = &[$($name),*];
    };
}

pub mod f {
    use crate::hooks::FnId;

    mod raw {
        id_table! { Idx, NAMES;
            MEMCPY = "utils_memcpy8",
            ALLOC_OR_DIE = "dynamic_memory_AllocateOrDie",
            ALLOC_OR_NULL = "dynamic_memory_AllocateOrReturnNULL",
            SPECIAL_ALLOC = "dynamic_memory_SpecialBlockPoolAllocateOrReturnNULL",
            RELEASE = "dynamic_memory_Release",
            ACL_ALLOC_UP = "mmulp_allocACLUp",
            ACL_ALLOC_RX = "acl_allocRxBuffer",
            CONTEXT_SWITCH = "_tx_thread_context_switch",
            TIMER_ISR = "osapi_timerIsr",
            UART_SEND = "uart_SendAsynch",
            UART_RECV = "uart_ReceiveSynch",
            BCS_ISR = "bcs_isr",
            BCS_RX_HDR = "bcs_phyRxHeaderDone",
            BCS_RX_DONE = "bcs_phyRxDone",
            BCS_TX_DONE = "bcs_phyTxDone",
            BCS_SLOT11 = "bcs_slot11Int",
            EIR_RX = "inq_handleEirRx",
            BLE_RX = "le_handleRxPdu",
            BLE_LL_CTRL = "ll_handleControlPdu",
            ACL_RX = "acl_handleRx",
            SCO_RX = "sco_handleRx",
            PAGING_RX = "page_handleRx",
            ADV_RX = "scan_handleAdvRx",
            LMP_DISPATCH = "lm_HandleLmpPdu",
            LM_SEND_LMP = "lm_SendLmpPdu",
            LM_SETUP_FINALIZE = "lm_setup_finalize",
            HCI_CMD = "hci_HandleCommand",
            HCI_SEND_EVENT = "hci_SendEvent",
            BT_SEND_ACL = "bttransport_SendAcl",
            NAME_COMPLETE = "lm_SendRemoteNameComplete",
            NAME_TIMEOUT = "lm_RemoteNameTimeout",
            LINK_KEY_REQUEST = "lm_SendLinkKeyRequest",
            LINK_KEY_REPLY = "lm_HandleLinkKeyReply",
            LINK_KEY_NEG = "lm_HandleLinkKeyNegReply",
            NVRAM_WRITE = "nvram_write",
            HAL_NVRAM_WRITE = "hal_nvram_write",
            COEX_WRITE = "coex_write",
            SOFT_RESET = "bthci_Reset",
        }
    }

    pub use raw::NAMES;

    pub const MEMCPY: FnId = FnId(raw::MEMCPY);
    pub const ALLOC_OR_DIE: FnId = FnId(raw::ALLOC_OR_DIE);
    pub const ALLOC_OR_NULL: FnId = FnId(raw::ALLOC_OR_NULL);
    pub const SPECIAL_ALLOC: FnId = FnId(raw::SPECIAL_ALLOC);
    pub const RELEASE: FnId = FnId(raw::RELEASE);
    pub const ACL_ALLOC_UP: FnId = FnId(raw::ACL_ALLOC_UP);
    pub const ACL_ALLOC_RX: FnId = FnId(raw::ACL_ALLOC_RX);
    pub const CONTEXT_SWITCH: FnId = FnId(raw::CONTEXT_SWITCH);
    pub const TIMER_ISR: FnId = FnId(raw::TIMER_ISR);
    pub const UART_SEND: FnId = FnId(raw::UART_SEND);
    pub const UART_RECV: FnId = FnId(raw::UART_RECV);
    pub const BCS_ISR: FnId = FnId(raw::BCS_ISR);
    pub const BCS_RX_HDR: FnId = FnId(raw::BCS_RX_HDR);
    pub const BCS_RX_DONE: FnId = FnId(raw::BCS_RX_DONE);
    pub const BCS_TX_DONE: FnId = FnId(raw::BCS_TX_DONE);
    pub const BCS_SLOT11: FnId = FnId(raw::BCS_SLOT11);
    pub const EIR_RX: FnId = FnId(raw::EIR_RX);
    pub const BLE_RX: FnId = FnId(raw::BLE_RX);
    pub const BLE_LL_CTRL: FnId = FnId(raw::BLE_LL_CTRL);
    pub const ACL_RX: FnId = FnId(raw::ACL_RX);
    pub const SCO_RX: FnId = FnId(raw::SCO_RX);
    pub const PAGING_RX: FnId = FnId(raw::PAGING_RX);
    pub const ADV_RX: FnId = FnId(raw::ADV_RX);
    pub const LMP_DISPATCH: FnId = FnId(raw::LMP_DISPATCH);
    pub const LM_SEND_LMP: FnId = FnId(raw::LM_SEND_LMP);
    pub const LM_SETUP_FINALIZE: FnId = FnId(raw::LM_SETUP_FINALIZE);
    pub const HCI_CMD: FnId = FnId(raw::HCI_CMD);
    pub const HCI_SEND_EVENT: FnId = FnId(raw::HCI_SEND_EVENT);
    pub const BT_SEND_ACL: FnId = FnId(raw::BT_SEND_ACL);
    pub const NAME_COMPLETE: FnId = FnId(raw::NAME_COMPLETE);
    pub const NAME_TIMEOUT: FnId = FnId(raw::NAME_TIMEOUT);
    pub const LINK_KEY_REQUEST: FnId = FnId(raw::LINK_KEY_REQUEST);
    pub const LINK_KEY_REPLY: FnId = FnId(raw::LINK_KEY_REPLY);
    pub const LINK_KEY_NEG: FnId = FnId(raw::LINK_KEY_NEG);
    pub const NVRAM_WRITE: FnId = FnId(raw::NVRAM_WRITE);
    pub const HAL_NVRAM_WRITE: FnId = FnId(raw::HAL_NVRAM_WRITE);
    pub const COEX_WRITE: FnId = FnId(raw::COEX_WRITE);
    pub const SOFT_RESET: FnId = FnId(raw::SOFT_RESET);

    pub const LMP_OP_BASE: u16 = NAMES.len() as u16;
    pub const LMP_EXT_BASE: u16 = LMP_OP_BASE + 128;
    pub const COUNT: u16 = LMP_EXT_BASE + 128;

    pub fn lmp_op(op: u8) -> FnId {
        FnId(LMP_OP_BASE + (op & 0x7f) as u16)
    }

    pub fn lmp_ext_op(op: u8) -> FnId {
        FnId(LMP_EXT_BASE + (op & 0x7f) as u16)
    }

    /// Allocator and copy primitives; they never count as the faulting handler.
    pub fn is_utility(f: FnId) -> bool {
        f.0 <= raw::ACL_ALLOC_RX || f == UART_SEND || f == CONTEXT_SWITCH || f == TIMER_ISR
    }
}

const FN_ROM_BASE: u32 = 0x020000;
const FN_ROM_STRIDE: u32 = 0x180;

fn fn_addr(i: u16) -> u32 {
    FN_ROM_BASE + i as u32 * FN_ROM_STRIDE
}

/// Function table shared by all instances.
pub fn fn_table() -> Arc<FnTable> {
    static TABLE: OnceLock<Arc<FnTable>> = OnceLock::new();
    TABLE
        .get_or_init(|| {
            let mut t = FnTable::new();
            for (i, name) in f::NAMES.iter().enumerate() {
                let returns = matches!(
                    FnId(i as u16),
                    f::ALLOC_OR_DIE | f::ALLOC_OR_NULL | f::SPECIAL_ALLOC | f::ACL_ALLOC_UP | f::ACL_ALLOC_RX
                );
                t.push(*name, fn_addr(i as u16), returns);
            }
            for op in 0..128u16 {
                t.push(format!("lmp_handle_op_{op:02x}"), fn_addr(f::LMP_OP_BASE + op), false);
            }
            for op in 0..128u16 {
                t.push(format!("lmp_handle_ext_op_{op:02x}"), fn_addr(f::LMP_EXT_BASE + op), false);
            }
            Arc::new(t)
        })
        .clone()
}

pub mod b {
    id_table! { Idx, NAMES;
        BOOT_ENTRY = "boot.entry",
        BOOT_HARD = "boot.hard",
        BOOT_POOLS = "boot.pools",
        SCHED_SWITCH = "sched.switch",
        SCHED_IDLE = "sched.idle",
        SCHED_LM = "sched.lm",
        SCHED_BT = "sched.bttransport",
        TIMER_FIRE = "timer.fire",
        BCS_ISR = "bcs.isr",
        BCS_RX_HDR = "bcs.rx_hdr",
        BCS_RX_HDR_CONT = "bcs.rx_hdr.continuation",
        BCS_RX_HDR_SWITCH = "bcs.rx_hdr.task_switch",
        BCS_RX_HDR_STAY = "bcs.rx_hdr.unknown_link",
        BCS_RX_DONE = "bcs.rx_done",
        BCS_RX_DONE_IDLE = "bcs.rx_done.no_header",
        BCS_RX_MORE = "bcs.rx_done.more_frames",
        BCS_RX_COMPLETE = "bcs.rx_done.complete",
        BCS_TX_DONE = "bcs.tx_done",
        BCS_SLOT11 = "bcs.slot11",
        BCS_SLOT11_TX = "bcs.slot11.tx_pending",
        TASK_INQUIRY = "task.inquiry",
        TASK_LE_CONN = "task.le_conn",
        TASK_ACL = "task.acl",
        TASK_SCO = "task.sco",
        TASK_PAGING = "task.paging",
        TASK_ADV = "task.advertising",
        EIR_ENTRY = "eir.entry",
        EIR_LEN_REJECT = "eir.len_reject",
        EIR_ALLOC_FAIL = "eir.alloc_fail",
        EIR_COPY = "eir.copy",
        EIR_EMPTY = "eir.empty",
        EIR_POST = "eir.post",
        BLE_ENTRY = "ble.entry",
        BLE_CRC_BAD = "ble.crc_bad",
        BLE_EMPTY = "ble.empty",
        BLE_ALLOC_FAIL = "ble.alloc_fail",
        BLE_COPY = "ble.copy",
        BLE_CRC_BYTE = "ble.crc_byte",
        BLE_DATA = "ble.data",
        BLE_CTRL = "ble.ll_control",
        BLE_CTRL_UNKNOWN = "ble.ll_control.unknown",
        BLE_LLID_RSV = "ble.llid_reserved",
        ACL_ENTRY = "acl.entry",
        ACL_NO_LINK = "acl.no_link",
        ACL_LLID_RSV = "acl.llid_reserved",
        ACL_LEN_REJECT = "acl.len_reject",
        ACL_ALLOC_FAIL = "acl.alloc_fail",
        ACL_COPY = "acl.copy",
        ACL_EMPTY = "acl.empty",
        ACL_FLOW_STOP = "acl.flow_stop",
        ACL_LMP = "acl.lmp",
        ACL_LMP_TOO_LONG = "acl.lmp.too_long",
        ACL_LMP_EMPTY = "acl.lmp.empty",
        SCO_ENTRY = "sco.entry",
        PAGING_ENTRY = "paging.entry",
        PAGING_RESPONSE = "paging.response",
        ADV_ENTRY = "adv.entry",
        ADV_FILTERED = "adv.filtered",
        ADV_REPORT = "adv.report",
        MEMCPY_ENTRY = "memcpy.entry",
        MEMCPY_LOOP = "memcpy.loop",
        MEMCPY_TAIL = "memcpy.tail",
        MEMCPY_EXIT = "memcpy.exit",
        ALLOC_ENTRY = "alloc.entry",
        ALLOC_NULL = "alloc.null",
        ALLOC_TOO_BIG = "alloc.too_big",
        SPECIAL_ALLOC_ENTRY = "alloc.special",
        RELEASE_ENTRY = "release.entry",
        RELEASE_FOREIGN = "release.foreign",
        ACL_UP_ENTRY = "mmulp.alloc_acl_up",
        LM_EVENT = "lm.event",
        LM_LMP = "lm.lmp",
        LM_LMP_NO_LINK = "lm.lmp.no_link",
        LM_LMP_ESCAPE = "lm.lmp.escape",
        LM_LMP_TID_SLAVE = "lm.lmp.tid_slave",
        LM_SEND_LMP = "lm.send_lmp",
        LM_HCI = "lm.hci",
        LM_TIMER = "lm.timer",
        LMP_NAME_REQ_OK = "lmp.name_req.in_range",
        LMP_NAME_REQ_BAD = "lmp.name_req.out_of_range",
        LMP_NAME_RES_UNSOLICITED = "lmp.name_res.unsolicited",
        LMP_NAME_RES_FRAGMENT = "lmp.name_res.fragment",
        LMP_NAME_RES_BAD_OFFSET = "lmp.name_res.bad_offset",
        LMP_NAME_RES_DONE = "lmp.name_res.complete",
        LMP_FEATURES_REPLY = "lmp.features_req.reply",
        LMP_FEATURES_STORE = "lmp.features_res.store",
        LMP_VERSION_REPLY = "lmp.version_req.reply",
        LMP_VERSION_STORE = "lmp.version_res.store",
        LMP_DETACH = "lmp.detach.link_down",
        LMP_AU_RAND_KEY = "lmp.au_rand.key_cached",
        LMP_AU_RAND_ASK = "lmp.au_rand.ask_host",
        LMP_SRES_OK = "lmp.sres.match",
        LMP_SRES_BAD = "lmp.sres.mismatch",
        LMP_SRES_UNEXPECTED = "lmp.sres.unexpected",
        LMP_ENC_MODE_ON = "lmp.encryption_mode.on",
        LMP_ENC_MODE_OFF = "lmp.encryption_mode.off",
        LMP_ENC_START_NO_MODE = "lmp.start_encryption.rejected",
        LMP_ENC_START_OK = "lmp.start_encryption.started",
        LMP_ENC_STOP = "lmp.stop_encryption",
        LMP_KEY_SIZE_OK = "lmp.key_size.accept",
        LMP_KEY_SIZE_BAD = "lmp.key_size.reject",
        LMP_SWITCH_ACCEPT = "lmp.switch.accept",
        LMP_SWITCH_ENCRYPTED = "lmp.switch.encrypted_reject",
        LMP_MAX_SLOT_OK = "lmp.max_slot.accept",
        LMP_MAX_SLOT_BAD = "lmp.max_slot.reject",
        LMP_SNIFF_OK = "lmp.sniff.accept",
        LMP_SNIFF_BAD = "lmp.sniff.reject",
        LMP_UNSNIFF = "lmp.unsniff",
        LMP_HOLD = "lmp.hold",
        LMP_POWER = "lmp.power",
        LMP_CLKOFFSET_REPLY = "lmp.clkoffset.reply",
        LMP_TIMING_REPLY = "lmp.timing_accuracy.reply",
        LMP_ACCEPTED = "lmp.accepted",
        LMP_NOT_ACCEPTED = "lmp.not_accepted",
        LMP_SETUP_GATE1 = "lmp.setup.host_connection",
        LMP_SETUP_GATE2 = "lmp.setup.timing_after_host",
        LMP_SETUP_RESET = "lmp.setup.out_of_order",
        LMP_SETUP_COMPLETE_EARLY = "lmp.setup.complete_early",
        SETUP_FINALIZE = "lm.setup_finalize",
        LMP_UNKNOWN = "lmp.unknown_opcode",
        LMP_EXT_UNKNOWN = "lmp.ext.unknown_opcode",
        LMP_BADLEN = "lmp.len_mismatch",
        LMP_EXT_BADLEN = "lmp.ext.len_mismatch",
        LMP_PING_REPLY = "lmp.ping.reply",
        LMP_IO_CAP = "lmp.io_capability",
        LMP_IO_CAP_AUTH = "lmp.io_capability.mitm",
        LMP_AFH = "lmp.set_afh",
        LMP_AFH_BAD = "lmp.set_afh.bad_map",
        HCI_CMD = "hci.cmd",
        HCI_RESET = "hci.reset",
        HCI_READ_BUFFER_SIZE = "hci.read_buffer_size",
        HCI_INQUIRY = "hci.inquiry",
        HCI_LE_SCAN_ON = "hci.le_scan.enable",
        HCI_LE_SCAN_OFF = "hci.le_scan.disable",
        HCI_REMOTE_NAME = "hci.remote_name",
        HCI_REMOTE_NAME_NO_CONN = "hci.remote_name.no_connection",
        HCI_LINK_KEY_REPLY = "hci.link_key_reply",
        HCI_LINK_KEY_NEG = "hci.link_key_negative_reply",
        HCI_CREATE_CONN = "hci.create_connection",
        HCI_CREATE_CONN_FULL = "hci.create_connection.no_slot",
        HCI_UNKNOWN = "hci.unknown_command",
        HCI_BAD_LEN = "hci.bad_length",
        HCI_EVENT = "hci.send_event",
        HCI_SEND_ACL = "hci.send_acl",
        UART_RX = "uart.rx",
        UART_RX_TYPE = "uart.rx.type",
        UART_RX_BAD_TYPE = "uart.rx.bad_type",
        UART_RX_HDR = "uart.rx.header",
        UART_RX_BODY = "uart.rx.body",
        UART_RX_CMD = "uart.rx.command",
        UART_RX_ACL = "uart.rx.acl",
        UART_RX_SCO = "uart.rx.sco",
        UART_TX = "uart.tx",
        NAME_START = "name.start",
        NAME_EMIT = "name.complete",
        NAME_TIMEOUT = "name.timeout",
        LINK_KEY_REQUEST = "linkkey.request",
        LINK_KEY_STORE = "linkkey.store",
        LINK_KEY_UNKNOWN = "linkkey.unknown_link",
        LINK_KEY_NEG = "linkkey.negative",
        CONN_COMPLETE = "conn.complete",
        NVRAM_HAL = "nvram.hal",
        NVRAM_HAL_REJECT = "nvram.hal.reject",
        NVRAM_WRITE = "nvram.write",
        NVRAM_BRICK = "nvram.brick",
        COEX_WRITE = "coex.write",
        RESET_SOFT = "reset.soft",
    }

    pub const LL_CTRL_BASE: u16 = NAMES.len() as u16;
    pub const LL_CTRL_OPS: u16 = 0x20;
    /// Per LMP opcode: entry, length ok, and the handler's path on a link
    /// that finished setup. Extended opcodes have no third slot.
    pub const LMP_BASE: u16 = LL_CTRL_BASE + LL_CTRL_OPS;
    pub const LMP_EXT_BASE: u16 = LMP_BASE + 128 * 3;
    pub const COUNT: u16 = LMP_EXT_BASE + 128 * 2;

    pub fn ll_ctrl(op: u8) -> u16 {
        LL_CTRL_BASE + (op as u16).min(LL_CTRL_OPS - 1)
    }

    pub fn lmp_entry(op: u8) -> u16 {
        LMP_BASE + (op & 0x7f) as u16 * 3
    }

    pub fn lmp_ok(op: u8) -> u16 {
        lmp_entry(op) + 1
    }

    pub fn lmp_established(op: u8) -> u16 {
        lmp_entry(op) + 2
    }

    pub fn lmp_ext_entry(op: u8) -> u16 {
        LMP_EXT_BASE + (op & 0x7f) as u16 * 2
    }

    pub fn lmp_ext_ok(op: u8) -> u16 {
        lmp_ext_entry(op) + 1
    }

    pub fn name(id: u16) -> String {
        if let Some(n) = NAMES.get(id as usize) {
            return n.to_string();
        }
        if (LL_CTRL_BASE..LMP_BASE).contains(&id) {
            return format!("ll_ctrl.op_{:02x}", id - LL_CTRL_BASE);
        }
        let suffix = ["entry", "len_ok", "established"];
        if (LMP_BASE..LMP_EXT_BASE).contains(&id) {
            let k = id - LMP_BASE;
            return format!("lmp.op_{:02x}.{}", k / 3, suffix[(k % 3) as usize]);
        }
        if (LMP_EXT_BASE..COUNT).contains(&id) {
            let k = id - LMP_EXT_BASE;
            return format!("lmp.ext_op_{:02x}.{}", k / 2, suffix[(k % 2) as usize]);
        }
        format!("block_{id}")
    }

    /// Synthetic program counter of a block.
    pub fn pc(id: u16) -> u32 {
        0x0c0000 + id as u32 * 0x10
    }
}

/// Total number of instrumented blocks.
pub const BLOCK_COUNT: u16 = b::COUNT;

/// LMP opcodes and their PDU lengths in bytes (opcode byte included).
pub fn lmp_pdu_len(op: u8) -> Option<usize> {
    Some(match op {
        1 => 2,   // name_req
        2 => 17,  // name_res
        3 => 2,   // accepted
        4 => 3,   // not_accepted
        5 => 1,   // clkoffset_req
        6 => 3,   // clkoffset_res
        7 => 2,   // detach
        8 => 17,  // in_rand
        9 => 17,  // comb_key
        10 => 17, // unit_key
        11 => 17, // au_rand
        12 => 5,  // sres
        13 => 17, // temp_rand
        14 => 17, // temp_key
        15 => 2,  // encryption_mode_req
        16 => 2,  // encryption_key_size_req
        17 => 17, // start_encryption_req
        18 => 1,  // stop_encryption_req
        19 => 5,  // switch_req
        20 => 7,  // hold
        21 => 7,  // hold_req
        23 => 10, // sniff_req
        24 => 1,  // unsniff_req
        31 => 2,  // incr_power_req
        32 => 2,  // decr_power_req
        33 => 1,  // max_power
        34 => 1,  // min_power
        35 => 1,  // auto_rate
        36 => 2,  // preferred_rate
        37 => 6,  // version_req
        38 => 6,  // version_res
        39 => 9,  // features_req
        40 => 9,  // features_res
        41 => 4,  // quality_of_service
        42 => 4,  // quality_of_service_req
        43 => 7,  // sco_link_req
        44 => 3,  // remove_sco_link_req
        45 => 2,  // max_slot
        46 => 2,  // max_slot_req
        47 => 1,  // timing_accuracy_req
        48 => 3,  // timing_accuracy_res
        49 => 1,  // setup_complete
        50 => 1,  // use_semi_permanent_key
        51 => 1,  // host_connection_req
        52 => 9,  // slot_offset
        53 => 3,  // page_mode_req
        54 => 3,  // page_scan_mode_req
        55 => 3,  // supervision_timeout
        56 => 1,  // test_activate
        57 => 10, // test_control
        58 => 1,  // encryption_key_size_mask_req
        59 => 3,  // encryption_key_size_mask_res
        60 => 16, // set_afh
        61 => 4,  // encapsulated_header
        62 => 17, // encapsulated_payload
        63 => 17, // simple_pairing_confirm
        64 => 17, // simple_pairing_number
        65 => 17, // dhkey_check
        66 => 1,  // pause_encryption_aes_req
        _ => return None,
    })
}

/// Extended (escape 127) opcodes and their PDU lengths.
pub fn lmp_ext_pdu_len(op: u8) -> Option<usize> {
    Some(match op {
        1 => 4,   // accepted_ext
        2 => 5,   // not_accepted_ext
        3 => 12,  // features_req_ext
        4 => 12,  // features_res_ext
        11 => 3,  // packet_type_table_req
        12 => 16, // esco_link_req
        13 => 4,  // remove_esco_link_req
        16 => 7,  // channel_classification_req
        17 => 12, // channel_classification
        21 => 9,  // sniff_subrating_req
        22 => 9,  // sniff_subrating_res
        23 => 2,  // pause_encryption_req
        24 => 2,  // resume_encryption_req
        25 => 5,  // io_capability_req
        26 => 5,  // io_capability_res
        27 => 2,  // numeric_comparison_failed
        28 => 2,  // passkey_failed
        29 => 2,  // oob_failed
        30 => 3,  // keypress_notification
        31 => 3,  // power_control_req
        32 => 3,  // power_control_res
        33 => 2,  // ping_req
        34 => 2,  // ping_res
        _ => return None,
    })
}

pub const LMP_NAME_REQ: u8 = 1;
pub const LMP_NAME_RES: u8 = 2;
pub const LMP_ACCEPTED: u8 = 3;
pub const LMP_NOT_ACCEPTED: u8 = 4;
pub const LMP_AU_RAND: u8 = 11;
pub const LMP_SRES: u8 = 12;
pub const LMP_FEATURES_RES: u8 = 40;
pub const LMP_VERSION_RES: u8 = 38;
pub const LMP_TIMING_ACCURACY_REQ: u8 = 47;
pub const LMP_SETUP_COMPLETE: u8 = 49;
pub const LMP_HOST_CONNECTION_REQ: u8 = 51;
pub const LMP_ESCAPE: u8 = 127;

/// Byte 0 of an LMP PDU.
pub fn lmp_byte0(op: u8, tid: u8) -> u8 {
    (op << 1) | (tid & 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn function_table_exceeds_largest_budget() {
        let t = fn_table();
        assert!(t.len() > 257);
        assert_eq!(t.name(f::MEMCPY), "utils_memcpy8");
        assert_eq!(t.name(f::lmp_op(0x33)), "lmp_handle_op_33");
        assert!(t.returns(f::ALLOC_OR_DIE) && !t.returns(f::RELEASE));
    }

    #[test]
    fn block_names_are_unique() {
        let mut names: Vec<String> = (0..BLOCK_COUNT).map(b::name).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn pools_fit_in_ram() {
        let ends = [
            LM_POOL_START + LM_POOL_CAP * (LM_POOL_SIZE + 4),
            EVENT_POOL_START + EVENT_POOL_CAP * (EVENT_POOL_SIZE + 4),
            ACL_POOL_START + ACL_POOL_CAP * (1021 + 4),
        ];
        assert!(ends[0] <= EVENT_POOL_START);
        assert!(ends[1] <= ACL_POOL_START);
        assert!(ends[2] <= BLE_POOL_START);
        const { assert!(BLE_POOL_START + 0x0f * (0x108 + 4) <= RAM_BASE + RAM_LEN) };
    }
}
