//! Byte transports between the emulated controller and a host stack.

use std::collections::VecDeque;
use std::ffi::CStr;
use std::io;
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use thiserror::Error;

use crate::firmware::Firmware;
use crate::hooks::Halt;

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("bridge closed by the peer")]
    Closed,
    #[error("bridge i/o: {0}")]
    Io(#[from] io::Error),
    #[error("controller halted: {0}")]
    Halt(Halt),
}

pub trait Transport {
    fn send(&mut self, bytes: &[u8]) -> Result<(), BridgeError>;
    /// Bytes available within `timeout`; empty when none arrived.
    fn recv(&mut self, timeout: Duration) -> Result<Vec<u8>, BridgeError>;
}

/// One end of an in-process byte pipe.
pub struct Loopback {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

pub fn loopback_pair() -> (Loopback, Loopback) {
    let (a_tx, b_rx) = channel();
    let (b_tx, a_rx) = channel();
    (Loopback { tx: a_tx, rx: a_rx }, Loopback { tx: b_tx, rx: b_rx })
}

impl Transport for Loopback {
    fn send(&mut self, bytes: &[u8]) -> Result<(), BridgeError> {
        self.tx.send(bytes.to_vec()).map_err(|_| BridgeError::Closed)
    }

    fn recv(&mut self, timeout: Duration) -> Result<Vec<u8>, BridgeError> {
        let mut out = match self.rx.recv_timeout(timeout) {
            Ok(v) => v,
            Err(RecvTimeoutError::Timeout) => return Ok(Vec::new()),
            Err(RecvTimeoutError::Disconnected) => return Err(BridgeError::Closed),
        };
        while let Ok(v) = self.rx.try_recv() {
            out.extend(v);
        }
        Ok(out)
    }
}

/// Pseudo-terminal whose slave side a host stack can attach to as a UART.
pub struct PtyBridge {
    master: OwnedFd,
    slave_path: String,
}

impl PtyBridge {
    pub fn open() -> Result<Self, BridgeError> {
        // SAFETY: plain libc calls; the returned descriptor is checked and
        // owned exactly once.
        unsafe {
            let fd = libc::posix_openpt(libc::O_RDWR | libc::O_NOCTTY);
            if fd < 0 {
                return Err(io::Error::last_os_error().into());
            }
            let master = OwnedFd::from_raw_fd(fd);
            if libc::grantpt(fd) != 0 || libc::unlockpt(fd) != 0 {
                return Err(io::Error::last_os_error().into());
            }
            let mut name = [0 as libc::c_char; 128];
            if libc::ptsname_r(fd, name.as_mut_ptr(), name.len()) != 0 {
                return Err(io::Error::last_os_error().into());
            }
            let slave_path = CStr::from_ptr(name.as_ptr()).to_string_lossy().into_owned();
            let mut tio: libc::termios = std::mem::zeroed();
            if libc::tcgetattr(fd, &mut tio) == 0 {
                libc::cfmakeraw(&mut tio);
                libc::tcsetattr(fd, libc::TCSANOW, &tio);
            }
            Ok(PtyBridge { master, slave_path })
        }
    }

    pub fn slave_path(&self) -> &str {
        &self.slave_path
    }
}

impl Transport for PtyBridge {
    fn send(&mut self, mut bytes: &[u8]) -> Result<(), BridgeError> {
        while !bytes.is_empty() {
            // SAFETY: writes from a valid slice into an owned descriptor.
            let n = unsafe { libc::write(self.master.as_raw_fd(), bytes.as_ptr().cast(), bytes.len()) };
            if n < 0 {
                let e = io::Error::last_os_error();
                if e.raw_os_error() == Some(libc::EIO) {
                    return Err(BridgeError::Closed);
                }
                return Err(e.into());
            }
            bytes = &bytes[n as usize..];
        }
        Ok(())
    }

    fn recv(&mut self, timeout: Duration) -> Result<Vec<u8>, BridgeError> {
        let fd = self.master.as_raw_fd();
        let mut pfd = libc::pollfd { fd, events: libc::POLLIN, revents: 0 };
        // SAFETY: one valid pollfd.
        let r = unsafe { libc::poll(&mut pfd, 1, timeout.as_millis().min(i32::MAX as u128) as i32) };
        if r < 0 {
            return Err(io::Error::last_os_error().into());
        }
        if r == 0 {
            return Ok(Vec::new());
        }
        if pfd.revents & libc::POLLIN == 0 && pfd.revents & (libc::POLLHUP | libc::POLLERR) != 0 {
            return Err(BridgeError::Closed);
        }
        let mut buf = vec![0u8; 4096];
        // SAFETY: reads into an owned buffer of the given length.
        let n = unsafe { libc::read(fd, buf.as_mut_ptr().cast(), buf.len()) };
        if n < 0 {
            let e = io::Error::last_os_error();
            if e.raw_os_error() == Some(libc::EIO) {
                return Err(BridgeError::Closed);
            }
            return Err(e.into());
        }
        if n == 0 {
            return Err(BridgeError::Closed);
        }
        buf.truncate(n as usize);
        Ok(buf)
    }
}

/// Moves bytes between a transport and the controller UART while advancing
/// simulated time.
pub struct HostLink<T: Transport> {
    pub transport: T,
    /// Ticks run per pump iteration.
    pub ticks_per_pump: u64,
    backlog: VecDeque<u8>,
}

impl<T: Transport> HostLink<T> {
    pub fn new(transport: T) -> Self {
        HostLink { transport, ticks_per_pump: 16, backlog: VecDeque::new() }
    }

    /// One iteration: host bytes in, time forward, controller bytes out.
    /// Returns the number of bytes sent to the host.
    pub fn pump(&mut self, fw: &mut Firmware, wait: Duration) -> Result<usize, BridgeError> {
        let incoming = self.transport.recv(wait)?;
        if !incoming.is_empty() {
            self.backlog.extend(incoming);
            let bytes: Vec<u8> = self.backlog.drain(..).collect();
            fw.uart_rx(&bytes);
        }
        fw.run_until_idle().map_err(BridgeError::Halt)?;
        for _ in 0..self.ticks_per_pump {
            fw.tick().map_err(BridgeError::Halt)?;
        }
        let out = fw.take_hci_output();
        if !out.is_empty() {
            self.transport.send(&out)?;
        }
        Ok(out.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::firmware::FirmwareProfile;
    use crate::hci::consts::*;
    use crate::hci::h4::{decode_stream, H4Packet};

    #[test]
    fn loopback_reset_round_trip() {
        let (host_end, fw_end) = loopback_pair();
        let mut host = host_end;
        let mut link = HostLink::new(fw_end);
        let mut fw = Firmware::boot(FirmwareProfile::default(), 3).unwrap();
        host.send(&H4Packet::command(OP_RESET, &[]).encode().unwrap()).unwrap();
        link.pump(&mut fw, Duration::from_millis(100)).unwrap();
        let got = host.recv(Duration::from_millis(100)).unwrap();
        let ps = decode_stream(&got).unwrap();
        assert_eq!(ps, vec![H4Packet::event(EV_COMMAND_COMPLETE, &[1, 0x03, 0x0c, 0])]);
    }

    #[test]
    fn loopback_reports_close() {
        let (a, b) = loopback_pair();
        drop(b);
        let mut a = a;
        assert!(matches!(a.recv(Duration::from_millis(1)), Err(BridgeError::Closed)));
    }

    #[test]
    fn pty_carries_bytes() {
        let Ok(mut pty) = PtyBridge::open() else { return };
        let path = pty.slave_path().to_string();
        let mut slave = std::fs::OpenOptions::new().read(true).write(true).open(&path).unwrap();
        use std::io::{Read, Write};
        slave.write_all(&[1, 3, 0x0c, 0]).unwrap();
        let got = pty.recv(Duration::from_millis(500)).unwrap();
        assert_eq!(got, vec![1, 3, 0x0c, 0]);
        pty.send(&[4, 0x0e, 0]).unwrap();
        let mut buf = [0u8; 3];
        slave.read_exact(&mut buf).unwrap();
        assert_eq!(buf, [4, 0x0e, 0]);
    }
}
