//! Host transport: H4 framing over the UART, event and ACL delivery.

use super::layout::*;
use super::{BtMsg, Firmware, LmMsg};
use crate::hci::consts::{H4_ACL, H4_COMMAND, H4_EVENT, H4_SCO};
use crate::hooks::{FirmwareAbort, Halt};
use crate::memory::MemError;

impl Firmware {
    pub(super) fn write_event_header(&mut self, buf: u32, code: u8, plen: u8) -> Result<(), MemError> {
        let mut h = [0u8; EVT_OFF_PARAMS as usize];
        h[EVT_OFF_LEN as usize..EVT_OFF_LEN as usize + 2].copy_from_slice(&(3 + plen as u16).to_le_bytes());
        h[EVT_OFF_TYPE as usize] = H4_EVENT;
        h[EVT_OFF_CODE as usize] = code;
        h[EVT_OFF_PLEN as usize] = plen;
        self.space.write_bytes(buf, &h)
    }

    /// Allocates an event buffer, fills it and queues it for the host.
    pub(super) fn emit_event(&mut self, code: u8, params: &[u8]) -> Result<(), Halt> {
        let n = params.len().min(EVT_MAX_PARAMS as usize);
        let buf = self.call(f::ALLOC_OR_DIE, &[EVENT_POOL_SIZE])?;
        self.write_event_header(buf, code, n as u8)?;
        self.space.write_bytes(buf + EVT_OFF_PARAMS, &params[..n])?;
        self.call(f::HCI_SEND_EVENT, &[buf])?;
        Ok(())
    }

    pub(super) fn fn_hci_send_event(&mut self, buf: u32) -> Result<(), Halt> {
        self.cov(b::HCI_EVENT)?;
        self.st.counters.events_sent += 1;
        self.st.bt_q.push_back(BtMsg::SendEvent { buf });
        Ok(())
    }

    pub(super) fn handle_bt(&mut self, m: BtMsg) -> Result<(), Halt> {
        match m {
            BtMsg::SendEvent { buf } => {
                let total = self.space.read_u16(buf + EVT_OFF_LEN)? as u32;
                self.call(f::UART_SEND, &[buf + EVT_OFF_TYPE, total])?;
                self.call(f::RELEASE, &[buf])?;
            }
            BtMsg::SendAcl { buf, off, len, handle } => {
                self.call(f::BT_SEND_ACL, &[buf, off, len, handle as u32])?;
            }
            BtMsg::UartRx(bytes) => {
                self.st.counters.uart_bytes_in += bytes.len() as u32;
                self.st.uart.fifo.extend(bytes);
                self.call(f::UART_RECV, &[])?;
            }
        }
        Ok(())
    }

    pub(super) fn fn_bt_send_acl(&mut self, buf: u32, off: u32, len: u32, handle: u16) -> Result<(), Halt> {
        self.cov(b::HCI_SEND_ACL)?;
        self.st.counters.acl_sent += 1;
        let len = len.min(super::UART_TX_LEN - 5);
        let mut pkt = Vec::with_capacity(5 + len as usize);
        pkt.push(H4_ACL);
        pkt.extend_from_slice(&(handle & 0x0fff | 0x2000).to_le_bytes());
        pkt.extend_from_slice(&(len as u16).to_le_bytes());
        pkt.resize(5 + len as usize, 0);
        self.space.read_into(buf + off, &mut pkt[5..])?;
        self.space.write_bytes(super::UART_TX_SCRATCH, &pkt)?;
        self.call(f::UART_SEND, &[super::UART_TX_SCRATCH, pkt.len() as u32])?;
        self.call(f::RELEASE, &[buf])?;
        Ok(())
    }

    pub(super) fn fn_uart_send(&mut self, ptr: u32, len: u32) -> Result<(), Halt> {
        self.cov(b::UART_TX)?;
        let start = self.hci_out.len();
        self.hci_out.resize(start + len as usize, 0);
        self.space.read_into(ptr, &mut self.hci_out[start..])?;
        if self.hci_out[start] == H4_EVENT && len > 3 + EVT_MAX_PARAMS {
            return Err(FirmwareAbort::Assert { reason: format!("event of {len} bytes exceeds the H4 limit") }.into());
        }
        Ok(())
    }

    /// H4 receive state machine over the UART FIFO.
    pub(super) fn fn_uart_recv(&mut self) -> Result<(), Halt> {
        self.cov(b::UART_RX)?;
        while let Some(byte) = self.st.uart.fifo.pop_front() {
            if self.st.uart.pkt.is_empty() {
                if matches!(byte, H4_COMMAND | H4_ACL | H4_SCO) {
                    self.st.uart.pkt.push(byte);
                    self.cov(b::UART_RX_TYPE)?;
                } else {
                    self.cov(b::UART_RX_BAD_TYPE)?;
                }
                continue;
            }
            let pkt = &mut self.st.uart.pkt;
            pkt.push(byte);
            let hlen = if pkt[0] == H4_ACL { 4 } else { 3 };
            if pkt.len() < 1 + hlen {
                continue;
            }
            let blen = match pkt[0] {
                H4_ACL => u16::from_le_bytes([pkt[3], pkt[4]]) as usize,
                _ => pkt[3] as usize,
            };
            let got = pkt.len();
            if got == 1 + hlen {
                self.cov(b::UART_RX_HDR)?;
            }
            if got < 1 + hlen + blen {
                continue;
            }
            let pkt = std::mem::take(&mut self.st.uart.pkt);
            self.cov(b::UART_RX_BODY)?;
            match pkt[0] {
                H4_COMMAND => {
                    self.cov(b::UART_RX_CMD)?;
                    let buf = self.call(f::ALLOC_OR_DIE, &[pkt.len() as u32 - 1])?;
                    self.space.write_bytes(buf, &pkt[1..])?;
                    self.st.lm_q.push_back(LmMsg::HciCmd { buf });
                }
                H4_ACL => self.cov(b::UART_RX_ACL)?,
                _ => self.cov(b::UART_RX_SCO)?,
            }
        }
        Ok(())
    }
}
