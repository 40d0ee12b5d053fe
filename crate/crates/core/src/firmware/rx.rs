//! Baseband core scheduler interrupt and the per-task receive handlers.

use super::layout::*;
use super::{air::PayloadHeader, BtMsg, Firmware, LmMsg, RxProgress, Task, TimerKind};
use crate::hooks::Halt;
use crate::memory::MemError;
use crate::modem::crc::{crc24, Crc24State};
use crate::modem::{PhyFlags, RX_CHUNK};

impl Firmware {
    pub(super) fn fn_bcs_isr(&mut self, flags: u32, log: u32, hdr: u32, valid: u32) -> Result<(), Halt> {
        self.cov(b::BCS_ISR)?;
        let flags = PhyFlags::from_bits_truncate(flags as u8);
        if flags.contains(PhyFlags::RX_HDR_DONE) {
            if valid != 0 {
                self.call(f::BCS_RX_HDR, &[log, hdr])?;
            }
        } else if flags.contains(PhyFlags::RX_DONE) {
            self.call(f::BCS_RX_DONE, &[valid])?;
        } else if flags.contains(PhyFlags::TX_DONE) {
            self.call(f::BCS_TX_DONE, &[])?;
        } else if flags.contains(PhyFlags::SLOT_11_INT) {
            self.call(f::BCS_SLOT11, &[])?;
        }
        Ok(())
    }

    pub(super) fn fn_bcs_rx_hdr(&mut self, log: u16, hdr: u16) -> Result<(), Halt> {
        self.cov(b::BCS_RX_HDR)?;
        if self.st.rx.is_some() {
            return self.cov(b::BCS_RX_HDR_CONT);
        }
        let link = ((log >> 3) & 7) as u8;
        match Task::from_id((log & 7) as u8) {
            Some(t) if self.task_enabled(t) => {
                if t != self.st.active {
                    self.cov(b::BCS_RX_HDR_SWITCH)?;
                    self.st.active = t;
                }
            }
            _ => self.cov(b::BCS_RX_HDR_STAY)?,
        }
        let task = self.st.active;
        self.cov(match task {
            Task::Acl => b::TASK_ACL,
            Task::Sco => b::TASK_SCO,
            Task::LeConn => b::TASK_LE_CONN,
            Task::Inquiry => b::TASK_INQUIRY,
            Task::Paging => b::TASK_PAGING,
            Task::Advertising => b::TASK_ADV,
        })?;
        let len = match task {
            Task::LeConn => ((hdr >> 8) & 0xff) as u32 + 3,
            Task::Advertising => ((hdr >> 8) & 0xff) as u32,
            _ => ((hdr >> 3) & 0x3ff) as u32,
        };
        let frames = len.div_ceil(RX_CHUNK as u32).max(1);
        self.st.rx = Some(RxProgress { task, link, pkt_log: log, hdr, frames, frame: 0 });
        Ok(())
    }

    pub(super) fn fn_bcs_rx_done(&mut self, valid: bool) -> Result<(), Halt> {
        self.cov(b::BCS_RX_DONE)?;
        let Some(rx) = self.st.rx.as_mut().filter(|_| valid) else {
            return self.cov(b::BCS_RX_DONE_IDLE);
        };
        rx.frame += 1;
        if rx.frame < rx.frames {
            return self.cov(b::BCS_RX_MORE);
        }
        let rx = self.st.rx.take().expect("checked above");
        self.cov(b::BCS_RX_COMPLETE)?;
        let (log, hdr) = (rx.pkt_log as u32, rx.hdr as u32);
        match rx.task {
            Task::LeConn => {
                if !self.ble_crc_ok(rx.hdr)? {
                    self.st.counters.ble_dropped += 1;
                    return self.cov(b::BLE_CRC_BAD);
                }
                self.call(f::BLE_RX, &[hdr])?;
            }
            Task::Advertising => {
                self.call(f::ADV_RX, &[hdr])?;
            }
            Task::Inquiry => {
                self.hw_tail((hdr >> 3) & 0x3ff, rx.pkt_log, rx.hdr)?;
                self.call(f::EIR_RX, &[hdr])?;
            }
            Task::Acl => {
                self.hw_tail((hdr >> 3) & 0x3ff, rx.pkt_log, rx.hdr)?;
                self.call(f::ACL_RX, &[hdr, log])?;
            }
            Task::Sco => {
                self.hw_tail((hdr >> 3) & 0x3ff, rx.pkt_log, rx.hdr)?;
                self.call(f::SCO_RX, &[hdr])?;
            }
            Task::Paging => {
                self.call(f::PAGING_RX, &[hdr])?;
            }
        }
        let _ = rx.link;
        Ok(())
    }

    pub(super) fn fn_bcs_tx_done(&mut self) -> Result<(), Halt> {
        self.cov(b::BCS_TX_DONE)?;
        if let Some(p) = self.st.air_tx.pop_front() {
            self.st.counters.lmp_sent += 1;
            if self.air_log.len() < super::AIR_LOG_CAP {
                self.air_log.push(p);
            }
        }
        Ok(())
    }

    pub(super) fn fn_bcs_slot11(&mut self) -> Result<(), Halt> {
        self.cov(b::BCS_SLOT11)?;
        if !self.st.air_tx.is_empty() {
            self.cov(b::BCS_SLOT11_TX)?;
        }
        Ok(())
    }

    /// Receive hardware leaves the packet log and header after the payload,
    /// followed by a copy of the payload's tail, inside a 512-byte window.
    pub(super) fn hw_tail(&mut self, len: u32, log: u16, hdr: u16) -> Result<(), MemError> {
        if len + 4 > DMA_RX_LEN {
            return Ok(());
        }
        let mut h = [0u8; 4];
        h[..2].copy_from_slice(&log.to_le_bytes());
        h[2..].copy_from_slice(&hdr.to_le_bytes());
        self.space.write_bytes(DMA_RX_BUF + len, &h)?;
        let s = len.min(HW_DUP_WINDOW.saturating_sub(len + 4));
        if s > 0 {
            let mut tail = [0u8; HW_DUP_WINDOW as usize];
            let tail = &mut tail[..s as usize];
            self.space.read_into(DMA_RX_BUF + len - s, tail)?;
            self.space.write_bytes(DMA_RX_BUF + len + 4, tail)?;
        }
        Ok(())
    }

    fn ble_crc_ok(&mut self, hdr: u16) -> Result<bool, MemError> {
        let Some(le) = self.st.le else { return Ok(false) };
        let len = ((hdr >> 8) & 0xff) as usize;
        let mut msg = [0u8; 2 + 255 + 3];
        msg[0] = (hdr & 0xff) as u8;
        msg[1] = len as u8;
        self.space.read_into(DMA_RX_BUF, &mut msg[2..2 + len + 3])?;
        let crc = crc24(Crc24State::new(le.crc_init), &msg[..2 + len]);
        Ok(crc[..] == msg[2 + len..2 + len + 3])
    }

    pub(super) fn fn_eir_rx(&mut self, hdr: u16) -> Result<(), Halt> {
        self.cov(b::EIR_ENTRY)?;
        let h = PayloadHeader::from_u16(hdr);
        if h.length > EVT_MAX_PARAMS as u16 {
            self.st.counters.eir_dropped += 1;
            return self.cov(b::EIR_LEN_REJECT);
        }
        if h.length == 0 {
            return self.cov(b::EIR_EMPTY);
        }
        let eff = h.effective_length(self.profile.rfu_bug);
        let buf = self.call(f::ALLOC_OR_NULL, &[EVENT_POOL_SIZE])?;
        if buf == 0 {
            self.st.counters.eir_dropped += 1;
            return self.cov(b::EIR_ALLOC_FAIL);
        }
        self.write_event_header(buf, crate::hci::consts::EV_EXT_INQUIRY_RESULT, EVT_MAX_PARAMS as u8)?;
        self.cov(b::EIR_COPY)?;
        self.call(f::MEMCPY, &[buf + EVT_OFF_PARAMS, DMA_RX_BUF, eff])?;
        self.cov(b::EIR_POST)?;
        self.call(f::HCI_SEND_EVENT, &[buf])?;
        Ok(())
    }

    pub(super) fn fn_ble_rx(&mut self, hdr: u16) -> Result<(), Halt> {
        self.cov(b::BLE_ENTRY)?;
        let llid = (hdr & 3) as u8;
        let len = ((hdr >> 8) & 0xff) as u32;
        if len == 0 {
            return self.cov(b::BLE_EMPTY);
        }
        if llid == 0 {
            return self.cov(b::BLE_LLID_RSV);
        }
        let buf = self.call(f::ACL_ALLOC_UP, &[BLE_RX_HDR + len])?;
        if buf == 0 {
            self.st.counters.ble_dropped += 1;
            return self.cov(b::BLE_ALLOC_FAIL);
        }
        self.cov(b::BLE_COPY)?;
        let mut n = len;
        if self.profile.ble_crc_copy_bug && len == 255 {
            self.cov(b::BLE_CRC_BYTE)?;
            n += 1;
        }
        self.call(f::MEMCPY, &[buf + BLE_RX_HDR, DMA_RX_BUF, n])?;
        if llid == 3 {
            self.cov(b::BLE_CTRL)?;
            let op = self.space.read_u8(buf + BLE_RX_HDR)?;
            self.call(f::BLE_LL_CTRL, &[buf, op as u32])?;
            self.call(f::RELEASE, &[buf])?;
        } else {
            self.cov(b::BLE_DATA)?;
            let handle = self.st.le.map_or(0, |l| l.handle);
            self.st.bt_q.push_back(BtMsg::SendAcl { buf, off: BLE_RX_HDR, len, handle });
        }
        Ok(())
    }

    pub(super) fn fn_ble_ll_ctrl(&mut self, _buf: u32, op: u32) -> Result<(), Halt> {
        if op >= b::LL_CTRL_OPS as u32 {
            return self.cov(b::BLE_CTRL_UNKNOWN);
        }
        self.cov(b::ll_ctrl(op as u8))
    }

    pub(super) fn fn_acl_rx(&mut self, hdr: u16, log: u16) -> Result<(), Halt> {
        self.cov(b::ACL_ENTRY)?;
        let link = ((log >> 3) & 7) as u8;
        let Some(handle) = self.connection(link).map(|c| c.handle) else {
            self.st.counters.acl_dropped += 1;
            return self.cov(b::ACL_NO_LINK);
        };
        let h = PayloadHeader::from_u16(hdr);
        let len = h.length as u32;
        match h.llid {
            0 => self.cov(b::ACL_LLID_RSV),
            3 => {
                self.cov(b::ACL_LMP)?;
                if len == 0 {
                    return self.cov(b::ACL_LMP_EMPTY);
                }
                if len as usize > LMP_MAX_PDU {
                    self.st.counters.lmp_dropped += 1;
                    return self.cov(b::ACL_LMP_TOO_LONG);
                }
                let buf = self.call(f::ALLOC_OR_DIE, &[LM_MSG_ALLOC])?;
                self.space.write_bytes(buf, &[link, len as u8])?;
                self.call(f::MEMCPY, &[buf + 2, DMA_RX_BUF, len])?;
                self.st.lm_q.push_back(LmMsg::Lmp { buf });
                Ok(())
            }
            _ => {
                if !h.flow {
                    self.cov(b::ACL_FLOW_STOP)?;
                }
                if len == 0 {
                    return self.cov(b::ACL_EMPTY);
                }
                let signaled = self.space.read_u16(ACL_CONFIG)? as u32;
                if len > signaled {
                    self.st.counters.acl_dropped += 1;
                    return self.cov(b::ACL_LEN_REJECT);
                }
                let buf = self.call(f::ACL_ALLOC_RX, &[len])?;
                if buf == 0 {
                    self.st.counters.acl_dropped += 1;
                    return self.cov(b::ACL_ALLOC_FAIL);
                }
                self.cov(b::ACL_COPY)?;
                self.call(f::MEMCPY, &[buf, DMA_RX_BUF, len])?;
                self.st.bt_q.push_back(BtMsg::SendAcl { buf, off: 0, len, handle });
                Ok(())
            }
        }
    }

    pub(super) fn fn_paging_rx(&mut self) -> Result<(), Halt> {
        self.cov(b::PAGING_ENTRY)?;
        if let Some(addr) = self.st.paging {
            self.cov(b::PAGING_RESPONSE)?;
            self.st.timers.retain(|t| !matches!(t.kind, TimerKind::PagingDone { .. }));
            self.st.lm_q.push_back(LmMsg::Timer(TimerKind::PagingDone { addr }));
        }
        Ok(())
    }

    pub(super) fn fn_adv_rx(&mut self, hdr: u16) -> Result<(), Halt> {
        self.cov(b::ADV_ENTRY)?;
        let len = ((hdr >> 8) & 0xff) as usize;
        if !self.st.scan_enabled || !(6..=37).contains(&len) {
            return self.cov(b::ADV_FILTERED);
        }
        self.cov(b::ADV_REPORT)?;
        let pdu = self.space.read_bytes(DMA_RX_BUF, len)?;
        let mut p = vec![crate::hci::consts::LE_ADVERTISING_REPORT, 1, (hdr & 0x0f) as u8, ((hdr >> 6) & 1) as u8];
        p.extend_from_slice(&pdu[..6]);
        p.push((len - 6) as u8);
        p.extend_from_slice(&pdu[6..]);
        p.push(0xc5);
        self.emit_event(crate::hci::consts::EV_LE_META, &p)
    }
}
