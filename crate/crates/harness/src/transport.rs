//! Enveloped byte transport with receiver-side latency injection.
//!
//! Every unit on a harness connection is wrapped in a small envelope
//! carrying the sender's dispatch time: `[u64 dispatch_us][u32 len][bytes]`.
//! The receiving side holds each unit until `dispatch + sampled latency`,
//! which emulates a one-way network delay per direction while the real
//! socket stays as fast as loopback allows. Deliveries are kept monotone so
//! jitter can never reorder an ordered stream.
//!
//! The envelope is measurement scaffolding, the replay stand-in for a
//! delay-injecting network; protocol byte accounting counts only the inner
//! payloads. Endpoints running on separate hosts use no injected latency
//! (`delay = None`) and take timestamps at arrival.

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::clock::SessionClock;

const ENVELOPE_HEADER: usize = 12;
/// Upper bound on one enveloped unit (a chunk header plus its payload).
const MAX_UNIT_BYTES: usize = 64 * 1024 * 1024;

/// Constant-plus-jitter one-way delay for one link direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkDelay {
    pub base_s: f64,
    pub jitter_s: f64,
}

impl LinkDelay {
    pub fn new(base_s: f64, jitter_s: f64) -> Self {
        Self { base_s, jitter_s }
    }
}

/// Bytes and message tallies, shared across the endpoints of one replay.
#[derive(Debug, Default)]
pub struct ByteCounters {
    /// Monitor/auditor control frames and sniffer metadata frames.
    pub control_msgs: AtomicU64,
    pub control_bytes: AtomicU64,
    /// Dummy chunk payload bytes on the video channel.
    pub payload_bytes: AtomicU64,
    /// Video channel framing: request/response/chunk headers/acks.
    pub video_meta_bytes: AtomicU64,
    pub chunks_sent: AtomicU64,
    pub acks_sent: AtomicU64,
}

impl ByteCounters {
    pub fn add_control(&self, bytes: usize) {
        self.control_msgs.fetch_add(1, Ordering::Relaxed);
        self.control_bytes
            .fetch_add(bytes as u64, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            control_msgs: self.control_msgs.load(Ordering::Relaxed),
            control_bytes: self.control_bytes.load(Ordering::Relaxed),
            payload_bytes: self.payload_bytes.load(Ordering::Relaxed),
            video_meta_bytes: self.video_meta_bytes.load(Ordering::Relaxed),
            chunks_sent: self.chunks_sent.load(Ordering::Relaxed),
            acks_sent: self.acks_sent.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CounterSnapshot {
    pub control_msgs: u64,
    pub control_bytes: u64,
    pub payload_bytes: u64,
    pub video_meta_bytes: u64,
    pub chunks_sent: u64,
    pub acks_sent: u64,
}

/// Writing half of an enveloped connection.
pub struct UnitSender {
    stream: TcpStream,
    clock: SessionClock,
}

impl UnitSender {
    pub fn new(stream: TcpStream, clock: SessionClock) -> Self {
        Self { stream, clock }
    }

    /// Sends one unit stamped with the current session time.
    pub fn send(&mut self, payload: &[u8]) -> io::Result<()> {
        let now = self.clock.now();
        self.send_at(payload, now)
    }

    /// Sends one unit with an explicit dispatch stamp. A stamp in the
    /// future is how a dishonest endpoint artificially delays its messages
    /// without blocking itself.
    pub fn send_at(&mut self, payload: &[u8], dispatch_session_s: f64) -> io::Result<()> {
        let mut head = [0u8; ENVELOPE_HEADER];
        let us = (dispatch_session_s * 1e6).round().max(0.0) as u64;
        head[..8].copy_from_slice(&us.to_be_bytes());
        head[8..].copy_from_slice(&(payload.len() as u32).to_be_bytes());
        self.stream.write_all(&head)?;
        self.stream.write_all(payload)?;
        Ok(())
    }

    pub fn try_clone(&self) -> io::Result<UnitSender> {
        Ok(UnitSender {
            stream: self.stream.try_clone()?,
            clock: self.clock.clone(),
        })
    }

    pub fn shutdown(&self) {
        let _ = self.stream.shutdown(std::net::Shutdown::Both);
    }
}

/// One delivered unit.
#[derive(Debug)]
pub struct Delivered {
    pub bytes: Vec<u8>,
    /// Session time at which the unit was handed to the application.
    pub at: f64,
}

/// What a bounded poll produced.
#[derive(Debug)]
pub enum Polled {
    Unit(Delivered),
    /// Nothing deliverable before the deadline.
    Timeout,
    /// Clean end of stream (and nothing left to deliver).
    Closed,
}

/// Reading half of an enveloped connection, with optional delay injection.
pub struct UnitReceiver {
    stream: TcpStream,
    clock: SessionClock,
    delay: Option<(LinkDelay, ChaCha8Rng)>,
    buf: Vec<u8>,
    /// Units already parsed, waiting for their delivery time.
    ready: VecDeque<(f64, Vec<u8>)>,
    last_delivery: f64,
    eof: bool,
}

impl UnitReceiver {
    pub fn new(
        stream: TcpStream,
        clock: SessionClock,
        delay: Option<LinkDelay>,
        seed: u64,
    ) -> Self {
        Self {
            stream,
            clock,
            delay: delay.map(|d| (d, ChaCha8Rng::seed_from_u64(seed))),
            buf: Vec::new(),
            ready: VecDeque::new(),
            last_delivery: 0.0,
            eof: false,
        }
    }

    /// Replaces the delay model; used once a handshake identifies which
    /// session (and therefore which latency profile) a connection belongs to.
    pub fn set_delay(&mut self, delay: Option<LinkDelay>, seed: u64) {
        self.delay = delay.map(|d| (d, ChaCha8Rng::seed_from_u64(seed)));
    }

    fn delivery_time(&mut self, dispatch: f64) -> f64 {
        let sampled = match &mut self.delay {
            Some((d, rng)) => {
                let jitter = if d.jitter_s > 0.0 {
                    rng.gen_range(0.0..d.jitter_s)
                } else {
                    0.0
                };
                dispatch + d.base_s + jitter
            }
            None => dispatch,
        };
        // Ordered transport: delivery times never go backwards.
        self.last_delivery = sampled.max(self.last_delivery);
        self.last_delivery
    }

    fn parse_available(&mut self) {
        loop {
            if self.buf.len() < ENVELOPE_HEADER {
                return;
            }
            let us = u64::from_be_bytes(self.buf[..8].try_into().expect("8 bytes"));
            let len = u32::from_be_bytes(self.buf[8..12].try_into().expect("4 bytes")) as usize;
            if len > MAX_UNIT_BYTES {
                // Treat as stream corruption; drop the connection.
                self.eof = true;
                self.buf.clear();
                return;
            }
            if self.buf.len() < ENVELOPE_HEADER + len {
                return;
            }
            let unit = self.buf[ENVELOPE_HEADER..ENVELOPE_HEADER + len].to_vec();
            self.buf.drain(..ENVELOPE_HEADER + len);
            let deliver_at = self.delivery_time(us as f64 / 1e6);
            self.ready.push_back((deliver_at, unit));
        }
    }

    /// Drains whatever the socket has without blocking.
    fn slurp(&mut self) -> io::Result<()> {
        if self.eof {
            return Ok(());
        }
        let mut chunk = [0u8; 16384];
        loop {
            match self.stream.read(&mut chunk) {
                Ok(0) => {
                    self.eof = true;
                    break;
                }
                Ok(n) => {
                    self.buf.extend_from_slice(&chunk[..n]);
                    if n < chunk.len() {
                        break;
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                Err(e) if e.kind() == io::ErrorKind::TimedOut => break,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e),
            }
        }
        self.parse_available();
        Ok(())
    }

    /// Blocks until one unit is deliverable, the stream ends, or session
    /// time `until` is reached.
    pub fn poll(&mut self, until: f64) -> io::Result<Polled> {
        loop {
            // Keep the kernel buffer drained even while units wait out
            // their delivery delay.
            self.stream.set_nonblocking(true)?;
            let res = self.slurp();
            self.stream.set_nonblocking(false)?;
            res?;

            if let Some((deliver_at, _)) = self.ready.front() {
                let now = self.clock.now();
                if *deliver_at <= now {
                    // The stamp is the modeled arrival, which under load can
                    // trail the wall clock: scheduling noise must not leak
                    // into protocol timestamps.
                    let (at, bytes) = self.ready.pop_front().expect("front checked");
                    return Ok(Polled::Unit(Delivered { bytes, at }));
                }
                if *deliver_at <= until {
                    self.clock.sleep_until(*deliver_at);
                    continue;
                }
                self.clock.sleep_until(until);
                return Ok(Polled::Timeout);
            }

            if self.eof {
                return Ok(Polled::Closed);
            }
            let now = self.clock.now();
            if now >= until {
                return Ok(Polled::Timeout);
            }
            // Wait for bytes, but never past the deadline.
            let wall_budget = self
                .clock
                .wall_duration(until - now)
                .max(Duration::from_millis(1));
            self.stream.set_read_timeout(Some(wall_budget))?;
            let mut chunk = [0u8; 16384];
            match self.stream.read(&mut chunk) {
                Ok(0) => self.eof = true,
                Ok(n) => {
                    self.buf.extend_from_slice(&chunk[..n]);
                    self.parse_available();
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {}
                Err(e) if e.kind() == io::ErrorKind::TimedOut => {}
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e),
            }
        }
    }

    /// Polls with no deadline other than the stream's end.
    pub fn poll_blocking(&mut self) -> io::Result<Polled> {
        loop {
            match self.poll(self.clock.now() + 5.0)? {
                Polled::Timeout => continue,
                other => return Ok(other),
            }
        }
    }
}

/// Connects both halves over an established stream.
pub fn split(
    stream: TcpStream,
    clock: &SessionClock,
    delay: Option<LinkDelay>,
    seed: u64,
) -> io::Result<(UnitSender, UnitReceiver)> {
    let reader = stream.try_clone()?;
    Ok((
        UnitSender::new(stream, clock.clone()),
        UnitReceiver::new(reader, clock.clone(), delay, seed),
    ))
}

/// Shared counters handle.
pub type Counters = Arc<ByteCounters>;
