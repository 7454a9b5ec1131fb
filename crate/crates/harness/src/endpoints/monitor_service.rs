//! The server monitor as a network service: one listener for per-session
//! sniffer streams, one auditor connection per session.

use std::collections::HashMap;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use ugovor_core::server_monitor::{
    MonitorConfig, MonitorOutput, ServerWindowStats, SessionMonitor, SnifferRecord,
};
use ugovor_core::virtual_buffer::ChunkMap;
use ugovor_core::wire::{self, Body, Role, Verdict, WireMessage};

use crate::clock::SessionClock;
use crate::faults::{FaultBehavior, FaultScript};
use crate::transport::{split, Counters, LinkDelay, Polled, UnitSender};

pub struct MonitorServiceConfig {
    pub monitor_cfg: MonitorConfig,
    pub auditor_addr: String,
    pub contract_text: String,
    /// Inbound delay for auditor->monitor traffic (provider backbone).
    pub control_delay: Option<LinkDelay>,
    pub faults: Vec<FaultScript>,
    pub seed: u64,
    /// Sniffer listen address; loopback-ephemeral when unset.
    pub listen: Option<String>,
}

struct Entry {
    mon: SessionMonitor,
    auditor_tx: UnitSender,
    out_seq: u64,
    /// Armed server-side misbehavior, if any.
    deny_at: Option<f64>,
    drop_at: Option<f64>,
    terminated: bool,
}

impl Entry {
    fn send_outputs(
        &mut self,
        outs: Vec<MonitorOutput>,
        session_id: &str,
        now: f64,
        counters: &Counters,
    ) {
        if self.terminated {
            return;
        }
        for out in outs {
            let body = match out {
                MonitorOutput::Verdict { query, verdict } => {
                    match self.filter_verdict(verdict, now) {
                        Some(v) => Body::Verdict { verdict: v, query },
                        None => continue,
                    }
                }
                MonitorOutput::Misbehavior(report) => Body::Misbehavior { report },
                MonitorOutput::ResetDetected { new_start_pts } => Body::Reset {
                    origin: Role::ServerMonitor,
                    new_start_pts,
                },
            };
            self.out_seq += 1;
            let msg = WireMessage::new(session_id, self.out_seq, body);
            if let Ok(frame) = wire::encode(&msg) {
                counters.add_control(frame.len());
                let _ = self.auditor_tx.send(&frame);
            }
        }
    }

    /// Applies armed dishonesty to an outgoing verdict.
    fn filter_verdict(&mut self, verdict: Verdict, now: f64) -> Option<Verdict> {
        if let Some(at) = self.drop_at {
            if now >= at {
                self.drop_at = None;
                return None;
            }
        }
        if let Some(at) = self.deny_at {
            if now >= at && matches!(verdict, Verdict::Confirm { .. }) {
                self.deny_at = None;
                return Some(Verdict::Dispute {
                    reason: "event denied".into(),
                });
            }
        }
        Some(verdict)
    }
}

struct Shared {
    clock: SessionClock,
    cfg: MonitorServiceConfig,
    map: Arc<ChunkMap>,
    counters: Counters,
    sessions: Mutex<HashMap<String, Arc<Mutex<Entry>>>>,
    running: AtomicBool,
}

pub struct MonitorService {
    pub sniffer_addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl MonitorService {
    pub fn spawn(
        clock: SessionClock,
        map: Arc<ChunkMap>,
        cfg: MonitorServiceConfig,
        counters: Counters,
    ) -> std::io::Result<Self> {
        let listener = TcpListener::bind(cfg.listen.as_deref().unwrap_or("127.0.0.1:0"))?;
        let sniffer_addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let shared = Arc::new(Shared {
            clock,
            cfg,
            map,
            counters,
            sessions: Mutex::new(HashMap::new()),
            running: AtomicBool::new(true),
        });
        let mut threads = Vec::new();
        {
            let shared = Arc::clone(&shared);
            threads.push(std::thread::spawn(move || accept_loop(listener, shared)));
        }
        {
            let shared = Arc::clone(&shared);
            threads.push(std::thread::spawn(move || ticker(shared)));
        }
        Ok(Self {
            sniffer_addr,
            shared,
            threads,
        })
    }

    pub fn window_stats(&self, session_id: &str) -> Vec<ServerWindowStats> {
        let sessions = self.shared.sessions.lock().expect("sessions lock");
        match sessions.get(session_id) {
            Some(entry) => entry
                .lock()
                .expect("entry lock")
                .mon
                .window_stats()
                .to_vec(),
            None => Vec::new(),
        }
    }

    pub fn shutdown(mut self) {
        self.shared.running.store(false, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    while shared.running.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let shared = Arc::clone(&shared);
                std::thread::spawn(move || {
                    let _ = handle_sniffer(stream, shared);
                });
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(std::time::Duration::from_millis(5));
            }
            Err(_) => break,
        }
    }
}

fn ticker(shared: Arc<Shared>) {
    while shared.running.load(Ordering::SeqCst) {
        std::thread::sleep(std::time::Duration::from_millis(5));
        let entries: Vec<(String, Arc<Mutex<Entry>>)> = {
            let sessions = shared.sessions.lock().expect("sessions lock");
            sessions
                .iter()
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect()
        };
        let now = shared.clock.now();
        for (id, entry) in entries {
            let mut e = entry.lock().expect("entry lock");
            let outs = e.mon.tick(now);
            e.send_outputs(outs, &id, now, &shared.counters);
        }
    }
}

/// One sniffer stream carries one session's metadata records.
fn handle_sniffer(stream: TcpStream, shared: Arc<Shared>) -> std::io::Result<()> {
    // Sniffer-to-core is a provider-side link; no injected latency.
    let (_tx, mut rx) = split(stream, &shared.clock, None, 0)?;
    let mut session: Option<(String, Arc<Mutex<Entry>>)> = None;
    loop {
        if !shared.running.load(Ordering::SeqCst) {
            return Ok(());
        }
        let unit = match rx.poll(shared.clock.now() + 0.25)? {
            Polled::Unit(u) => u,
            Polled::Timeout => continue,
            Polled::Closed => return Ok(()),
        };
        shared.counters.add_control(unit.bytes.len());
        let rec: SnifferRecord = match serde_json::from_slice(&unit.bytes) {
            Ok(r) => r,
            Err(_) => continue,
        };
        let (id, entry) = match &session {
            Some(pair) => pair.clone(),
            None => {
                let pair = match register(&shared, &rec.session_id) {
                    Ok(p) => p,
                    Err(_) => return Ok(()),
                };
                session = Some((rec.session_id.clone(), pair));
                session.as_ref().expect("just set").clone()
            }
        };
        let mut e = entry.lock().expect("entry lock");
        match e.mon.ingest(&rec) {
            Ok(outs) => {
                let now = shared.clock.now();
                e.send_outputs(outs, &id, now, &shared.counters);
            }
            Err(err) => {
                // A sniffed stream that breaks the single-connection model
                // is evidence of dishonesty; the auditor decides.
                e.out_seq += 1;
                let msg = WireMessage::new(
                    &id,
                    e.out_seq,
                    Body::Misbehavior {
                        report: ugovor_core::wire::MisbehaviorReport {
                            window_chunks: 0,
                            ack_throughput_bps: 0.0,
                            consumed_bitrate_bps: 0.0,
                            ratio: 0.0,
                            detail: format!("sniffed stream anomaly: {err}"),
                        },
                    },
                );
                if let Ok(frame) = wire::encode(&msg) {
                    shared.counters.add_control(frame.len());
                    let _ = e.auditor_tx.send(&frame);
                }
            }
        }
    }
}

/// Creates the session entry and its auditor connection.
fn register(shared: &Arc<Shared>, session_id: &str) -> std::io::Result<Arc<Mutex<Entry>>> {
    {
        let sessions = shared.sessions.lock().expect("sessions lock");
        if let Some(e) = sessions.get(session_id) {
            return Ok(e.clone());
        }
    }
    let stream = TcpStream::connect(&shared.cfg.auditor_addr)?;
    let (mut tx, rx) = split(stream, &shared.clock, None, 0)?;
    let hello = WireMessage::new(
        session_id,
        1,
        Body::Hello {
            role: Role::ServerMonitor,
            contract_text: shared.cfg.contract_text.clone(),
        },
    );
    let frame = wire::encode(&hello).expect("hello encodes");
    shared.counters.add_control(frame.len());
    tx.send(&frame)?;

    let mut deny_at = None;
    let mut drop_at = None;
    for f in &shared.cfg.faults {
        if !f.applies_to(session_id) {
            continue;
        }
        match f.behavior {
            FaultBehavior::DenyEvent => deny_at = Some(f.activation_s),
            FaultBehavior::DropVerdict => drop_at = Some(f.activation_s),
            _ => {}
        }
    }

    let entry = Arc::new(Mutex::new(Entry {
        mon: SessionMonitor::new(Arc::clone(&shared.map), shared.cfg.monitor_cfg.clone()),
        auditor_tx: tx,
        out_seq: 1,
        deny_at,
        drop_at,
        terminated: false,
    }));
    shared
        .sessions
        .lock()
        .expect("sessions lock")
        .insert(session_id.to_string(), entry.clone());

    // Reader for the auditor's queries and syncs.
    {
        let shared = Arc::clone(shared);
        let entry = entry.clone();
        let session_id = session_id.to_string();
        let mut rx = rx;
        rx.set_delay(
            shared.cfg.control_delay,
            shared.cfg.seed ^ super::session_hash(&session_id),
        );
        std::thread::spawn(move || loop {
            if !shared.running.load(Ordering::SeqCst) {
                return;
            }
            let unit = match rx.poll(shared.clock.now() + 0.25) {
                Ok(Polled::Unit(u)) => u,
                Ok(Polled::Timeout) => continue,
                Ok(Polled::Closed) | Err(_) => return,
            };
            shared.counters.add_control(unit.bytes.len());
            let msg = match wire::decode(&unit.bytes) {
                Ok((m, _)) => m,
                Err(_) => continue,
            };
            let mut e = entry.lock().expect("entry lock");
            match msg.body {
                Body::Query { query } => {
                    let now = shared.clock.now().max(unit.at);
                    let outs = e.mon.answer_query(query, now);
                    e.send_outputs(outs, &session_id, now, &shared.counters);
                }
                Body::Sync { action } => e.mon.on_sync(&action),
                Body::Terminate { .. } => {
                    e.terminated = true;
                }
                _ => {}
            }
        });
    }
    Ok(entry)
}
