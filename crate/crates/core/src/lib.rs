//! Snapshot-based emulation and fuzzing of a synthetic Bluetooth controller.
//!
//! The crate is layered bottom-up: [`memory`] provides the guest address
//! space, [`heap`] the fixed-chunk allocator and its sanitizer, [`hooks`] the
//! interposition registry, [`firmware`] the target itself, [`modem`] the
//! slot-clocked radio front end, [`hci`] the host transport, and [`fuzzer`]
//! the campaign engine.

pub mod firmware;
pub mod fuzzer;
pub mod hci;
pub mod heap;
pub mod hooks;
pub mod memory;
pub mod modem;
pub mod scenario;
