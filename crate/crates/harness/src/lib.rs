//! Trace-driven replay of monitored streaming sessions.
//!
//! The harness replays recorded (or synthesized) session schedules over
//! real loopback TCP connections: a dummy-payload video server with a
//! metadata sniffer, a server-monitor service, an auditor service, and one
//! emulated client per session. Latency is injected per link direction,
//! time can be compressed through a scaled session clock, and scripted
//! dishonesty can be armed on either side. Each replay produces a
//! line-delimited report with every event, verdict, window outcome, and
//! byte tally.

pub mod clock;
pub mod endpoints;
pub mod faults;
pub mod replay;
pub mod report;
pub mod trace;
pub mod transport;
pub mod video;

pub use clock::SessionClock;
pub use replay::{replay, ReplayOptions, ReplayOutcome};
pub use report::SessionReport;
pub use trace::{generate_synthetic, load_traces, save_traces, CorpusParams, TraceSession};
