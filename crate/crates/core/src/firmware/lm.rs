//! Link manager: LMP handling, HCI command processing and timers.

use sha2::{Digest, Sha256};

use rand::RngCore;

use super::layout::*;
use super::{Firmware, LmMsg, NamePending, Task, TimerKind, NAME_TIMEOUT_NS, PAGING_NS};
use crate::hci::consts::*;
use crate::hooks::Halt;
use crate::memory::MemError;

/// Authentication response for a challenge under `key`.
pub fn sres(key: &[u8; 16], rand: &[u8]) -> [u8; 4] {
    let d = Sha256::new().chain_update(key).chain_update(rand).finalize();
    [d[0], d[1], d[2], d[3]]
}

const LMP_REASON_UNKNOWN_PDU: u8 = 0x19;
const LMP_REASON_INVALID_PARAMS: u8 = 0x1e;

impl Firmware {
    pub(super) fn handle_lm(&mut self, m: LmMsg) -> Result<(), Halt> {
        self.cov(b::LM_EVENT)?;
        match m {
            LmMsg::Lmp { buf } => {
                self.call(f::LMP_DISPATCH, &[buf])?;
            }
            LmMsg::HciCmd { buf } => {
                self.cov(b::LM_HCI)?;
                self.call(f::HCI_CMD, &[buf])?;
                self.call(f::RELEASE, &[buf])?;
            }
            LmMsg::Timer(k) => {
                self.cov(b::LM_TIMER)?;
                match k {
                    TimerKind::NameTimeout { link, buf } => {
                        self.call(f::NAME_TIMEOUT, &[link as u32, buf])?;
                    }
                    TimerKind::PagingDone { addr } => self.complete_connection(addr)?,
                    TimerKind::InquiryDone => self.emit_event(EV_INQUIRY_COMPLETE, &[STATUS_SUCCESS])?,
                    TimerKind::UartDelivery(bytes) => self.st.bt_q.push_back(super::BtMsg::UartRx(bytes)),
                }
            }
        }
        Ok(())
    }

    pub(super) fn add_conn(&mut self, addr: [u8; 6]) -> Result<Option<u8>, MemError> {
        let Some(slot) = self.st.conns.iter().position(|c| c.is_none()) else { return Ok(None) };
        let handle = 0x000b + slot as u16;
        self.st.conns[slot] = Some(super::Conn::new(addr, handle));
        let entry = LINK_TABLE + slot as u32 * LINK_ENTRY_LEN;
        self.space.write_bytes(entry, &addr)?;
        self.space.write_u16(entry + 6, handle)?;
        self.enable_task(Task::Acl);
        Ok(Some(slot as u8))
    }

    fn complete_connection(&mut self, addr: [u8; 6]) -> Result<(), Halt> {
        self.cov(b::CONN_COMPLETE)?;
        if self.st.paging != Some(addr) {
            return Ok(());
        }
        self.st.paging = None;
        self.st.timers.retain(|t| !matches!(t.kind, TimerKind::PagingDone { .. }));
        self.disable_task(Task::Paging);
        let mut p = vec![STATUS_CONNECTION_LIMIT, 0, 0];
        if let Some(link) = self.add_conn(addr)? {
            let h = self.st.conns[link as usize].as_ref().map_or(0, |c| c.handle);
            p = vec![STATUS_SUCCESS, h as u8, (h >> 8) as u8];
            self.activate_task(Task::Acl);
        }
        p.extend_from_slice(&addr);
        p.extend_from_slice(&[0x01, 0x00]);
        self.emit_event(EV_CONNECTION_COMPLETE, &p)
    }

    // ---- LMP -----------------------------------------------------------

    fn lm_send(&mut self, link: u8, pdu: &[u8]) -> Result<(), Halt> {
        self.space.write_bytes(super::LMP_TX_SCRATCH, pdu)?;
        self.call(f::LM_SEND_LMP, &[link as u32, super::LMP_TX_SCRATCH, pdu.len() as u32])?;
        Ok(())
    }

    pub(super) fn fn_lm_send_lmp(&mut self, _link: u32, ptr: u32, len: u32) -> Result<(), Halt> {
        self.cov(b::LM_SEND_LMP)?;
        let pdu = self.space.read_bytes(ptr, len as usize)?;
        if self.st.air_tx.len() >= super::AIR_TX_CAP {
            self.st.air_tx.pop_front();
        }
        self.st.air_tx.push_back(pdu);
        Ok(())
    }

    fn not_accepted(&mut self, link: u8, op: u8, reason: u8) -> Result<(), Halt> {
        self.lm_send(link, &[lmp_byte0(LMP_NOT_ACCEPTED, 0), op, reason])
    }

    fn read_lmp(&self, buf: u32, len: usize) -> Result<(u8, [u8; LMP_MAX_PDU]), MemError> {
        let link = self.space.read_u8(buf)?;
        let mut pdu = [0u8; LMP_MAX_PDU];
        let n = len.min(LMP_MAX_PDU);
        self.space.read_into(buf + 2, &mut pdu[..n])?;
        Ok((link, pdu))
    }

    pub(super) fn fn_lmp_dispatch(&mut self, buf: u32) -> Result<(), Halt> {
        self.cov(b::LM_LMP)?;
        let link = self.space.read_u8(buf)?;
        let len = self.space.read_u8(buf + 1)? as usize;
        if self.connection(link).is_some() {
            let byte0 = self.space.read_u8(buf + 2)?;
            if byte0 & 1 == 1 {
                self.cov(b::LM_LMP_TID_SLAVE)?;
            }
            let op = byte0 >> 1;
            if op == LMP_ESCAPE {
                self.cov(b::LM_LMP_ESCAPE)?;
                let ext = if len >= 2 { self.space.read_u8(buf + 3)? } else { 0 };
                self.call(f::lmp_ext_op(ext), &[buf, len as u32])?;
            } else {
                self.call(f::lmp_op(op), &[buf, len as u32])?;
            }
        } else {
            self.st.counters.lmp_dropped += 1;
            self.cov(b::LM_LMP_NO_LINK)?;
        }
        self.call(f::RELEASE, &[buf])?;
        Ok(())
    }

    pub(super) fn fn_lmp_op(&mut self, op: u8, buf: u32, len: usize) -> Result<(), Halt> {
        let (link, pdu) = self.read_lmp(buf, len)?;
        let Some(expected) = lmp_pdu_len(op) else {
            self.cov(b::LMP_UNKNOWN)?;
            return self.not_accepted(link, op, LMP_REASON_UNKNOWN_PDU);
        };
        if len != expected {
            self.cov(b::LMP_BADLEN)?;
            return self.not_accepted(link, op, LMP_REASON_INVALID_PARAMS);
        }
        self.cov(b::lmp_entry(op))?;
        self.cov(b::lmp_ok(op))?;
        let tid = pdu[0] & 1;
        let Some(conn) = self.connection(link) else {
            return Ok(());
        };
        if conn.setup_done {
            self.cov(b::lmp_established(op))?;
        }
        match op {
            LMP_NAME_REQ => self.lmp_name_req(link, tid, pdu[1])?,
            LMP_NAME_RES => self.lmp_name_res(link, tid, pdu[1], pdu[2], &pdu[3..17])?,
            LMP_ACCEPTED => self.cov(b::LMP_ACCEPTED)?,
            LMP_NOT_ACCEPTED => self.cov(b::LMP_NOT_ACCEPTED)?,
            5 => {
                self.cov(b::LMP_CLKOFFSET_REPLY)?;
                self.lm_send(link, &[lmp_byte0(6, tid), 0x34, 0x12])?;
            }
            7 => self.lmp_detach(link, pdu[1])?,
            LMP_AU_RAND => {
                let mut rand = [0u8; 16];
                rand.copy_from_slice(&pdu[1..17]);
                self.lmp_au_rand(link, tid, rand)?;
            }
            LMP_SRES => {
                let conn = self.conn_mut(link).expect("checked");
                let b = match conn.expect_sres.take() {
                    Some(e) if e[..] == pdu[1..5] => b::LMP_SRES_OK,
                    Some(_) => b::LMP_SRES_BAD,
                    None => b::LMP_SRES_UNEXPECTED,
                };
                self.cov(b)?;
            }
            15 => {
                let on = pdu[1] != 0;
                self.conn_mut(link).expect("checked").enc_mode = on;
                self.cov(if on { b::LMP_ENC_MODE_ON } else { b::LMP_ENC_MODE_OFF })?;
                self.lm_send(link, &[lmp_byte0(LMP_ACCEPTED, tid), op])?;
            }
            16 => {
                if (7..=16).contains(&pdu[1]) {
                    self.cov(b::LMP_KEY_SIZE_OK)?;
                    self.lm_send(link, &[lmp_byte0(LMP_ACCEPTED, tid), op])?;
                } else {
                    self.cov(b::LMP_KEY_SIZE_BAD)?;
                    self.not_accepted(link, op, 0x25)?;
                }
            }
            17 => {
                let conn = self.conn_mut(link).expect("checked");
                if conn.enc_mode {
                    conn.encrypted = true;
                    self.cov(b::LMP_ENC_START_OK)?;
                    self.lm_send(link, &[lmp_byte0(LMP_ACCEPTED, tid), op])?;
                } else {
                    self.cov(b::LMP_ENC_START_NO_MODE)?;
                    self.not_accepted(link, op, 0x24)?;
                }
            }
            18 => {
                self.conn_mut(link).expect("checked").encrypted = false;
                self.cov(b::LMP_ENC_STOP)?;
            }
            19 => {
                if self.connection(link).expect("checked").encrypted {
                    self.cov(b::LMP_SWITCH_ENCRYPTED)?;
                    self.not_accepted(link, op, 0x37)?;
                } else {
                    self.cov(b::LMP_SWITCH_ACCEPT)?;
                    self.lm_send(link, &[lmp_byte0(LMP_ACCEPTED, tid), op])?;
                }
            }
            20 | 21 => self.cov(b::LMP_HOLD)?,
            23 => {
                let t = u16::from_le_bytes([pdu[4], pdu[5]]);
                if t != 0 && t % 2 == 0 {
                    self.cov(b::LMP_SNIFF_OK)?;
                    self.lm_send(link, &[lmp_byte0(LMP_ACCEPTED, tid), op])?;
                } else {
                    self.cov(b::LMP_SNIFF_BAD)?;
                    self.not_accepted(link, op, LMP_REASON_INVALID_PARAMS)?;
                }
            }
            24 => self.cov(b::LMP_UNSNIFF)?,
            31..=34 => self.cov(b::LMP_POWER)?,
            37 => {
                self.cov(b::LMP_VERSION_REPLY)?;
                self.lm_send(link, &[lmp_byte0(LMP_VERSION_RES, tid), 9, 0x0f, 0x00, 0x0e, 0x41])?;
            }
            38 => self.cov(b::LMP_VERSION_STORE)?,
            39 => {
                self.cov(b::LMP_FEATURES_REPLY)?;
                self.lm_send(
                    link,
                    &[lmp_byte0(LMP_FEATURES_RES, tid), 0xbf, 0xfe, 0xcf, 0xfe, 0xdb, 0xff, 0x7b, 0x87],
                )?;
            }
            40 => self.cov(b::LMP_FEATURES_STORE)?,
            45 | 46 => {
                if matches!(pdu[1], 1 | 3 | 5) {
                    self.cov(b::LMP_MAX_SLOT_OK)?;
                } else {
                    self.cov(b::LMP_MAX_SLOT_BAD)?;
                }
            }
            LMP_HOST_CONNECTION_REQ | LMP_TIMING_ACCURACY_REQ | LMP_SETUP_COMPLETE => {
                self.lmp_setup_gate(link, op, tid)?
            }
            60 => {
                if pdu[15] & 0x80 != 0 {
                    self.cov(b::LMP_AFH_BAD)?;
                } else {
                    self.cov(b::LMP_AFH)?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub(super) fn fn_lmp_ext_op(&mut self, op: u8, buf: u32, len: usize) -> Result<(), Halt> {
        let (link, pdu) = self.read_lmp(buf, len)?;
        let reject = |reason: u8| [lmp_byte0(LMP_ESCAPE, 0), 2, LMP_ESCAPE, op, reason];
        let Some(expected) = lmp_ext_pdu_len(op) else {
            self.cov(b::LMP_EXT_UNKNOWN)?;
            return self.lm_send(link, &reject(LMP_REASON_UNKNOWN_PDU));
        };
        if len != expected {
            self.cov(b::LMP_EXT_BADLEN)?;
            return self.lm_send(link, &reject(LMP_REASON_INVALID_PARAMS));
        }
        self.cov(b::lmp_ext_entry(op))?;
        self.cov(b::lmp_ext_ok(op))?;
        let tid = pdu[0] & 1;
        match op {
            33 => {
                self.cov(b::LMP_PING_REPLY)?;
                self.lm_send(link, &[lmp_byte0(LMP_ESCAPE, tid), 34])?;
            }
            25 => {
                let auth = pdu[4];
                self.cov(if auth & 1 != 0 { b::LMP_IO_CAP_AUTH } else { b::LMP_IO_CAP })?;
                self.lm_send(link, &[lmp_byte0(LMP_ESCAPE, tid), 26, 0x01, 0x00, auth])?;
            }
            _ => {}
        }
        Ok(())
    }

    /// Connection setup runs host_connection_req, timing_accuracy_req,
    /// setup_complete, in that order.
    fn lmp_setup_gate(&mut self, link: u8, op: u8, tid: u8) -> Result<(), Halt> {
        let gate = self.connection(link).map_or(0, |c| c.gate);
        let next = match (op, gate) {
            (LMP_HOST_CONNECTION_REQ, 0) => {
                self.cov(b::LMP_SETUP_GATE1)?;
                self.lm_send(link, &[lmp_byte0(LMP_ACCEPTED, tid), op])?;
                1
            }
            (LMP_TIMING_ACCURACY_REQ, 1) => {
                self.cov(b::LMP_SETUP_GATE2)?;
                self.lm_send(link, &[lmp_byte0(48, tid), 250, 10])?;
                2
            }
            (LMP_SETUP_COMPLETE, 2) => {
                self.call(f::LM_SETUP_FINALIZE, &[link as u32])?;
                0
            }
            (LMP_TIMING_ACCURACY_REQ, _) => {
                self.cov(b::LMP_TIMING_REPLY)?;
                self.lm_send(link, &[lmp_byte0(48, tid), 250, 10])?;
                self.cov(b::LMP_SETUP_RESET)?;
                0
            }
            (LMP_SETUP_COMPLETE, _) => {
                self.cov(b::LMP_SETUP_COMPLETE_EARLY)?;
                self.cov(b::LMP_SETUP_RESET)?;
                0
            }
            _ => {
                self.cov(b::LMP_SETUP_RESET)?;
                0
            }
        };
        if let Some(c) = self.conn_mut(link) {
            c.gate = next;
        }
        Ok(())
    }

    pub(super) fn fn_setup_finalize(&mut self, link: u8) -> Result<(), Halt> {
        self.cov(b::SETUP_FINALIZE)?;
        if let Some(c) = self.conn_mut(link) {
            c.setup_done = true;
        }
        self.lm_send(link, &[lmp_byte0(LMP_SETUP_COMPLETE, 0)])
    }

    fn lmp_name_req(&mut self, link: u8, tid: u8, offset: u8) -> Result<(), Halt> {
        let mut name = [0u8; DEVICE_NAME_LEN as usize];
        self.space.read_into(DEVICE_NAME, &mut name)?;
        let name_len = name.iter().position(|&c| c == 0).unwrap_or(name.len());
        if (offset as usize) < name_len || offset == 0 {
            self.cov(b::LMP_NAME_REQ_OK)?;
            let mut pdu = [0u8; 17];
            pdu[0] = lmp_byte0(LMP_NAME_RES, tid);
            pdu[1] = offset;
            pdu[2] = name_len as u8;
            let o = offset as usize;
            let n = 14.min(name.len() - o);
            pdu[3..3 + n].copy_from_slice(&name[o..o + n]);
            self.lm_send(link, &pdu)
        } else {
            self.cov(b::LMP_NAME_REQ_BAD)?;
            self.not_accepted(link, LMP_NAME_REQ, LMP_REASON_INVALID_PARAMS)
        }
    }

    fn lmp_name_res(&mut self, link: u8, tid: u8, offset: u8, total: u8, frag: &[u8]) -> Result<(), Halt> {
        let Some(p) = self.connection(link).and_then(|c| c.name) else {
            return self.cov(b::LMP_NAME_RES_UNSOLICITED);
        };
        if offset as u32 != p.filled || offset as u32 >= DEVICE_NAME_LEN {
            return self.cov(b::LMP_NAME_RES_BAD_OFFSET);
        }
        self.cov(b::LMP_NAME_RES_FRAGMENT)?;
        let n = 14.min(DEVICE_NAME_LEN - offset as u32) as usize;
        self.space.write_bytes(p.buf + EVT_OFF_PARAMS + 7 + offset as u32, &frag[..n])?;
        let filled = p.filled + 14;
        self.conn_mut(link).expect("checked").name = Some(NamePending { buf: p.buf, filled });
        if filled >= total as u32 {
            self.cov(b::LMP_NAME_RES_DONE)?;
            self.call(f::NAME_COMPLETE, &[link as u32])?;
        } else {
            self.lm_send(link, &[lmp_byte0(LMP_NAME_REQ, tid), filled as u8])?;
        }
        Ok(())
    }

    pub(super) fn fn_name_complete(&mut self, link: u8) -> Result<(), Halt> {
        self.cov(b::NAME_EMIT)?;
        let Some(p) = self.conn_mut(link).and_then(|c| c.name.take()) else { return Ok(()) };
        self.st.timers.retain(|t| !matches!(t.kind, TimerKind::NameTimeout { link: l, .. } if l == link));
        self.call(f::HCI_SEND_EVENT, &[p.buf])?;
        Ok(())
    }

    pub(super) fn fn_name_timeout(&mut self, link: u8, buf: u32) -> Result<(), Halt> {
        self.cov(b::NAME_TIMEOUT)?;
        if let Some(c) = self.conn_mut(link) {
            if c.name.is_some_and(|p| p.buf == buf) {
                c.name = None;
            }
        }
        self.call(f::RELEASE, &[buf])?;
        Ok(())
    }

    fn lmp_detach(&mut self, link: u8, reason: u8) -> Result<(), Halt> {
        self.cov(b::LMP_DETACH)?;
        let Some(c) = self.st.conns[link as usize].take() else { return Ok(()) };
        if self.st.conns.iter().all(|c| c.is_none()) {
            self.disable_task(Task::Acl);
        }
        self.emit_event(EV_DISCONNECTION_COMPLETE, &[STATUS_SUCCESS, c.handle as u8, (c.handle >> 8) as u8, reason])
    }

    fn lmp_au_rand(&mut self, link: u8, tid: u8, rand: [u8; 16]) -> Result<(), Halt> {
        let key = self.connection(link).and_then(|c| c.link_key);
        match key {
            Some(key) => {
                self.cov(b::LMP_AU_RAND_KEY)?;
                let r = sres(&key, &rand);
                self.lm_send(link, &[lmp_byte0(LMP_SRES, tid), r[0], r[1], r[2], r[3]])?;
                let mut ours = [0u8; 16];
                self.st.rng.fill_bytes(&mut ours);
                self.conn_mut(link).expect("checked").expect_sres = Some(sres(&key, &ours));
                let mut pdu = vec![lmp_byte0(LMP_AU_RAND, tid ^ 1)];
                pdu.extend_from_slice(&ours);
                self.lm_send(link, &pdu)
            }
            None => {
                self.cov(b::LMP_AU_RAND_ASK)?;
                self.conn_mut(link).expect("checked").auth_rand = Some(rand);
                self.call(f::LINK_KEY_REQUEST, &[LINK_TABLE + link as u32 * LINK_ENTRY_LEN])?;
                Ok(())
            }
        }
    }

    pub(super) fn fn_link_key_request(&mut self, ptr: u32) -> Result<(), Halt> {
        self.cov(b::LINK_KEY_REQUEST)?;
        let mut addr = [0u8; 6];
        self.space.read_into(ptr, &mut addr)?;
        self.st.link_key_requested_ns = Some(self.now_ns());
        self.emit_event(EV_LINK_KEY_REQUEST, &addr)
    }

    pub(super) fn fn_link_key_reply(&mut self, ptr: u32) -> Result<u32, Halt> {
        let mut p = [0u8; 22];
        self.space.read_into(ptr, &mut p)?;
        self.st.link_key_reply_ns = Some(self.now_ns());
        let Some(link) = self.link_by_addr(&p[..6]) else {
            self.cov(b::LINK_KEY_UNKNOWN)?;
            return Ok(STATUS_UNKNOWN_CONNECTION as u32);
        };
        self.cov(b::LINK_KEY_STORE)?;
        let mut key = [0u8; 16];
        key.copy_from_slice(&p[6..22]);
        let conn = self.conn_mut(link).expect("found above");
        conn.link_key = Some(key);
        if let Some(rand) = conn.auth_rand.take() {
            let r = sres(&key, &rand);
            self.lm_send(link, &[lmp_byte0(LMP_SRES, 1), r[0], r[1], r[2], r[3]])?;
        }
        Ok(STATUS_SUCCESS as u32)
    }

    pub(super) fn fn_link_key_neg(&mut self, ptr: u32) -> Result<u32, Halt> {
        self.cov(b::LINK_KEY_NEG)?;
        let mut addr = [0u8; 6];
        self.space.read_into(ptr, &mut addr)?;
        self.st.link_key_reply_ns = Some(self.now_ns());
        let Some(link) = self.link_by_addr(&addr) else { return Ok(STATUS_UNKNOWN_CONNECTION as u32) };
        if self.conn_mut(link).expect("found above").auth_rand.take().is_some() {
            self.not_accepted(link, LMP_AU_RAND, STATUS_PIN_OR_KEY_MISSING)?;
        }
        Ok(STATUS_SUCCESS as u32)
    }

    // ---- HCI commands ----------------------------------------------------

    fn command_complete(&mut self, op: u16, ret: &[u8]) -> Result<(), Halt> {
        let mut p = vec![1, op as u8, (op >> 8) as u8];
        p.extend_from_slice(ret);
        self.emit_event(EV_COMMAND_COMPLETE, &p)
    }

    fn command_status(&mut self, op: u16, status: u8) -> Result<(), Halt> {
        self.emit_event(EV_COMMAND_STATUS, &[status, 1, op as u8, (op >> 8) as u8])
    }

    pub(super) fn fn_hci_cmd(&mut self, buf: u32) -> Result<(), Halt> {
        self.cov(b::HCI_CMD)?;
        let op = self.space.read_u16(buf)?;
        let plen = self.space.read_u8(buf + 2)? as usize;
        let params = self.space.read_bytes(buf + 3, plen)?;
        let want = match op {
            OP_RESET | OP_READ_BUFFER_SIZE => Some(0),
            OP_INQUIRY => Some(5),
            OP_CREATE_CONNECTION => Some(13),
            OP_REMOTE_NAME_REQUEST => Some(10),
            OP_LINK_KEY_REQUEST_REPLY => Some(22),
            OP_LINK_KEY_REQUEST_NEG_REPLY => Some(6),
            OP_LE_SET_SCAN_ENABLE => Some(2),
            _ => None,
        };
        match want {
            None => {
                self.cov(b::HCI_UNKNOWN)?;
                return self.command_status(op, STATUS_UNKNOWN_COMMAND);
            }
            Some(n) if n != plen => {
                self.cov(b::HCI_BAD_LEN)?;
                return self.command_status(op, STATUS_INVALID_PARAMS);
            }
            _ => {}
        }
        match op {
            OP_RESET => {
                self.cov(b::HCI_RESET)?;
                self.call(f::SOFT_RESET, &[])?;
                self.command_complete(op, &[STATUS_SUCCESS])
            }
            OP_READ_BUFFER_SIZE => {
                self.cov(b::HCI_READ_BUFFER_SIZE)?;
                let acl_len = self.space.read_u16(ACL_CONFIG)?;
                let acl_num = self.space.read_u16(ACL_CONFIG + 2)?;
                let mut r = vec![STATUS_SUCCESS];
                r.extend_from_slice(&acl_len.to_le_bytes());
                r.push(64);
                r.extend_from_slice(&acl_num.to_le_bytes());
                r.extend_from_slice(&0u16.to_le_bytes());
                self.command_complete(op, &r)
            }
            OP_INQUIRY => {
                self.cov(b::HCI_INQUIRY)?;
                self.command_status(op, STATUS_SUCCESS)?;
                self.activate_task(Task::Inquiry);
                let units = params[3].max(1) as u64;
                self.add_timer(units * 1_280_000_000, TimerKind::InquiryDone);
                Ok(())
            }
            OP_CREATE_CONNECTION => {
                let mut addr = [0u8; 6];
                addr.copy_from_slice(&params[..6]);
                if self.st.conns.iter().all(|c| c.is_some()) || self.st.paging.is_some() {
                    self.cov(b::HCI_CREATE_CONN_FULL)?;
                    return self.command_status(op, STATUS_CONNECTION_LIMIT);
                }
                self.cov(b::HCI_CREATE_CONN)?;
                self.command_status(op, STATUS_SUCCESS)?;
                self.st.paging = Some(addr);
                self.activate_task(Task::Paging);
                self.add_timer(PAGING_NS, TimerKind::PagingDone { addr });
                Ok(())
            }
            OP_REMOTE_NAME_REQUEST => self.hci_remote_name(op, &params),
            OP_LINK_KEY_REQUEST_REPLY => {
                self.cov(b::HCI_LINK_KEY_REPLY)?;
                let status = self.call(f::LINK_KEY_REPLY, &[buf + 3])? as u8;
                let mut r = vec![status];
                r.extend_from_slice(&params[..6]);
                self.command_complete(op, &r)
            }
            OP_LINK_KEY_REQUEST_NEG_REPLY => {
                self.cov(b::HCI_LINK_KEY_NEG)?;
                let status = self.call(f::LINK_KEY_NEG, &[buf + 3])? as u8;
                let mut r = vec![status];
                r.extend_from_slice(&params[..6]);
                self.command_complete(op, &r)
            }
            OP_LE_SET_SCAN_ENABLE => {
                if params[0] == 1 {
                    self.cov(b::HCI_LE_SCAN_ON)?;
                    self.st.scan_enabled = true;
                    self.activate_task(Task::Advertising);
                } else {
                    self.cov(b::HCI_LE_SCAN_OFF)?;
                    self.st.scan_enabled = false;
                    self.disable_task(Task::Advertising);
                }
                self.command_complete(op, &[STATUS_SUCCESS])
            }
            _ => unreachable!("filtered above"),
        }
    }

    fn hci_remote_name(&mut self, op: u16, params: &[u8]) -> Result<(), Halt> {
        self.cov(b::HCI_REMOTE_NAME)?;
        let Some(link) = self.link_by_addr(&params[..6]) else {
            self.cov(b::HCI_REMOTE_NAME_NO_CONN)?;
            return self.command_status(op, STATUS_UNKNOWN_CONNECTION);
        };
        if self.connection(link).is_some_and(|c| c.name.is_some()) {
            return self.command_status(op, 0x0c);
        }
        self.command_status(op, STATUS_SUCCESS)?;
        self.cov(b::NAME_START)?;
        let buf = self.call(f::ALLOC_OR_DIE, &[EVENT_POOL_SIZE])?;
        self.write_event_header(buf, EV_REMOTE_NAME_COMPLETE, EVT_MAX_PARAMS as u8)?;
        let mut body = [0u8; EVT_MAX_PARAMS as usize];
        body[1..7].copy_from_slice(&params[..6]);
        self.space.write_bytes(buf + EVT_OFF_PARAMS, &body)?;
        self.conn_mut(link).expect("found above").name = Some(NamePending { buf, filled: 0 });
        self.add_timer(NAME_TIMEOUT_NS, TimerKind::NameTimeout { link, buf });
        self.lm_send(link, &[lmp_byte0(LMP_NAME_REQ, 0), 0])
    }
}
