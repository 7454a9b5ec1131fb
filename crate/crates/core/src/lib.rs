//! UgoVor: multilateral micro-monitoring for streaming sessions.
//!
//! A streaming session is watched by three parties that must stay in
//! agreement: a client monitor next to the player, a server monitor fed by a
//! lightweight sniffer on the serving host, and an auditor that reconciles
//! the two views event by event. Contracts bound the per-window share of
//! each resolution and the number of rebuffering events; any provable
//! disagreement between the parties ends the session.
//!
//! This crate holds the protocol logic as pure state machines plus the wire
//! encoding. Transport, latency injection, and trace replay live in
//! `ugovor-harness`.

pub mod analytics;
pub mod auditor;
pub mod client_monitor;
pub mod contract;
pub mod server_monitor;
pub mod virtual_buffer;
pub mod wire;

pub use contract::{Contract, ContractOutcome, SessionLedger};
pub use virtual_buffer::{ChunkMap, ChunkRecord, VirtualBuffer};
