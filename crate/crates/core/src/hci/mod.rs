//! Host controller interface: H4 framing, a simulated host and byte bridges.

pub mod bridge;
pub mod consts;
pub mod h4;
pub mod host;

pub use bridge::{loopback_pair, BridgeError, HostLink, Loopback, PtyBridge, Transport};
pub use h4::{decode_stream, FramingError, H4Decoder, H4Packet};
pub use host::{
    derive_link_key, history_digest, CacheMiss, Countermeasure, HostAction, HostOracle, Responder, ResponseCache,
    ScriptedHost,
};
