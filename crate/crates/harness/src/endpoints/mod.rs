//! The four endpoint roles of a replayed session.

pub mod auditor_service;
pub mod client;
pub mod monitor_service;
pub mod video_server;

/// Stable per-session hash for deriving deterministic RNG seeds.
pub(crate) fn session_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}
