//! The auditor as a network service: accepts monitor connections, runs the
//! per-session reconciliation state machine, and persists audit logs.

use std::collections::HashMap;
use std::io::Write as _;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use ugovor_core::auditor::{AuditRecord, AuditSession, AuditorConfig, AuditorOutput, SessionState};
use ugovor_core::contract::Contract;
use ugovor_core::wire::{self, Body, Role, WireMessage};

use crate::clock::SessionClock;
use crate::transport::{split, Counters, LinkDelay, Polled, UnitSender};

/// Per-session inbound delay models, keyed by session id.
#[derive(Debug, Clone, Default)]
pub struct InboundDelays {
    pub from_client: HashMap<String, LinkDelay>,
    pub from_server_monitor: Option<LinkDelay>,
}

pub struct AuditorServiceConfig {
    pub auditor_cfg: AuditorConfig,
    pub log_dir: Option<PathBuf>,
    pub delays: InboundDelays,
    pub seed: u64,
    /// Listen address; loopback-ephemeral when unset.
    pub listen: Option<String>,
}

struct Entry {
    audit: AuditSession,
    contract_text: String,
    client_tx: Option<UnitSender>,
    server_tx: Option<UnitSender>,
    pending_client: Vec<Vec<u8>>,
    pending_server: Vec<Vec<u8>>,
    out_seq: u64,
    last_seq: HashMap<&'static str, u64>,
    logged: bool,
}

impl Entry {
    fn dispatch(&mut self, outs: Vec<AuditorOutput>, session_id: &str, counters: &Counters) {
        for out in outs {
            match out {
                AuditorOutput::QueryServer(query) => {
                    self.send(false, session_id, Body::Query { query }, counters);
                }
                AuditorOutput::SyncBoth(action) => {
                    self.send(
                        true,
                        session_id,
                        Body::Sync {
                            action: action.clone(),
                        },
                        counters,
                    );
                    self.send(false, session_id, Body::Sync { action }, counters);
                }
                AuditorOutput::TerminateBoth(reason) => {
                    self.send(
                        true,
                        session_id,
                        Body::Terminate {
                            reason: reason.clone(),
                        },
                        counters,
                    );
                    self.send(false, session_id, Body::Terminate { reason }, counters);
                }
            }
        }
    }

    fn send(&mut self, to_client: bool, session_id: &str, body: Body, counters: &Counters) {
        self.out_seq += 1;
        let msg = WireMessage::new(session_id, self.out_seq, body);
        let frame = match wire::encode(&msg) {
            Ok(f) => f,
            Err(_) => return,
        };
        counters.add_control(frame.len());
        let (tx, pending) = if to_client {
            (&mut self.client_tx, &mut self.pending_client)
        } else {
            (&mut self.server_tx, &mut self.pending_server)
        };
        match tx {
            Some(sender) => {
                let _ = sender.send(&frame);
            }
            // The monitor has not connected yet; deliver on registration.
            None => pending.push(frame),
        }
    }
}

struct Shared {
    clock: SessionClock,
    cfg: AuditorServiceConfig,
    counters: Counters,
    sessions: Mutex<HashMap<String, Arc<Mutex<Entry>>>>,
    running: AtomicBool,
    index: Mutex<Option<std::fs::File>>,
}

impl Shared {
    fn entry(&self, session_id: &str, contract_text: &str, now: f64) -> Arc<Mutex<Entry>> {
        let mut sessions = self.sessions.lock().expect("sessions lock");
        sessions
            .entry(session_id.to_string())
            .or_insert_with(|| {
                let contract = Contract::parse(contract_text).unwrap_or_else(|_| {
                    // An unparseable contract at hello is a protocol error;
                    // register the session with a minimal stand-in so the
                    // error path below has somewhere to run.
                    Contract::parse(r#"{"window":1,"resolution":[[["720p",1]]],"rebuffering":[0]}"#)
                        .expect("stand-in contract parses")
                });
                Arc::new(Mutex::new(Entry {
                    audit: AuditSession::new(
                        session_id,
                        contract,
                        self.cfg.auditor_cfg.clone(),
                        now,
                    ),
                    contract_text: contract_text.to_string(),
                    client_tx: None,
                    server_tx: None,
                    pending_client: Vec::new(),
                    pending_server: Vec::new(),
                    out_seq: 0,
                    last_seq: HashMap::new(),
                    logged: false,
                }))
            })
            .clone()
    }

    fn persist(&self, session_id: &str, entry: &mut Entry) {
        if entry.logged {
            return;
        }
        entry.logged = true;
        let Some(dir) = &self.cfg.log_dir else { return };
        let path = dir.join(format!("{session_id}.jsonl"));
        if let Ok(mut f) = std::fs::File::create(&path) {
            let _ = f.write_all(entry.audit.export_log_jsonl().as_bytes());
        }
        if let Some(index) = self.index.lock().expect("index lock").as_mut() {
            let state = match entry.audit.state() {
                SessionState::Closed => "closed",
                SessionState::Terminating => "terminated",
                SessionState::Active => "active",
            };
            let windows = entry
                .audit
                .log()
                .iter()
                .filter(|r| matches!(r, AuditRecord::WindowClosed { .. }))
                .count();
            let _ = writeln!(
                index,
                "{}",
                serde_json::json!({
                    "session_id": session_id,
                    "outcome": state,
                    "windows": windows,
                    "log": format!("{session_id}.jsonl"),
                })
            );
        }
    }
}

pub struct AuditorService {
    pub addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl AuditorService {
    pub fn spawn(
        clock: SessionClock,
        cfg: AuditorServiceConfig,
        counters: Counters,
    ) -> std::io::Result<Self> {
        let listener = TcpListener::bind(cfg.listen.as_deref().unwrap_or("127.0.0.1:0"))?;
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let index = match &cfg.log_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(std::fs::File::create(dir.join("index.jsonl"))?)
            }
            None => None,
        };
        let shared = Arc::new(Shared {
            clock,
            cfg,
            counters,
            sessions: Mutex::new(HashMap::new()),
            running: AtomicBool::new(true),
            index: Mutex::new(index),
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
            addr,
            shared,
            threads,
        })
    }

    /// Snapshot of one session's auditor state and verified log.
    pub fn session_snapshot(&self, session_id: &str) -> Option<(SessionState, Vec<AuditRecord>)> {
        let sessions = self.shared.sessions.lock().expect("sessions lock");
        let entry = sessions.get(session_id)?.clone();
        drop(sessions);
        let entry = entry.lock().expect("entry lock");
        Some((entry.audit.state(), entry.audit.log().to_vec()))
    }

    pub fn shutdown(mut self) {
        self.shared.running.store(false, Ordering::SeqCst);
        // Flush logs for sessions still marked active at shutdown.
        let ids: Vec<String> = {
            let sessions = self.shared.sessions.lock().expect("sessions lock");
            sessions.keys().cloned().collect()
        };
        for id in ids {
            let entry = {
                let sessions = self.shared.sessions.lock().expect("sessions lock");
                sessions.get(&id).cloned()
            };
            if let Some(entry) = entry {
                let mut entry = entry.lock().expect("entry lock");
                self.shared.persist(&id, &mut entry);
            }
        }
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
                    let _ = handle_connection(stream, shared);
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
            let mut entry = entry.lock().expect("entry lock");
            let outs = entry.audit.tick(now);
            entry.dispatch(outs, &id, &shared.counters);
            if entry.audit.state() != SessionState::Active {
                shared.persist(&id, &mut entry);
            }
        }
    }
}

fn handle_connection(stream: TcpStream, shared: Arc<Shared>) -> std::io::Result<()> {
    let (tx, mut rx) = split(stream, &shared.clock, None, 0)?;
    // The first message identifies the session and the speaker.
    let hello = loop {
        match rx.poll(shared.clock.now() + 0.5)? {
            Polled::Unit(u) => break u,
            Polled::Timeout => {
                if !shared.running.load(Ordering::SeqCst) {
                    return Ok(());
                }
            }
            Polled::Closed => return Ok(()),
        }
    };
    let msg = match wire::decode(&hello.bytes) {
        Ok((m, _)) => m,
        Err(_) => return Ok(()),
    };
    shared.counters.add_control(hello.bytes.len());
    let (role, contract_text) = match &msg.body {
        Body::Hello {
            role,
            contract_text,
        } => (*role, contract_text.clone()),
        _ => return Ok(()),
    };
    let session_id = msg.session_id.clone();
    let entry = shared.entry(&session_id, &contract_text, hello.at);

    // Register the writer, flush anything queued for this role, and verify
    // both parties are talking about the same agreement.
    {
        let mut e = entry.lock().expect("entry lock");
        let pending = if role == Role::ClientMonitor {
            e.client_tx = Some(tx);
            std::mem::take(&mut e.pending_client)
        } else {
            e.server_tx = Some(tx);
            std::mem::take(&mut e.pending_server)
        };
        let sender = if role == Role::ClientMonitor {
            e.client_tx.as_mut()
        } else {
            e.server_tx.as_mut()
        };
        if let Some(sender) = sender {
            for frame in pending {
                let _ = sender.send(&frame);
            }
        }
        if e.contract_text != contract_text {
            let outs = e
                .audit
                .on_protocol_error("monitors disagree on the contract text".into(), hello.at);
            e.dispatch(outs, &session_id, &shared.counters);
        }
        e.last_seq.insert(role_key(role), msg.seq);
    }

    let delay = match role {
        Role::ClientMonitor => shared.cfg.delays.from_client.get(&session_id).copied(),
        Role::ServerMonitor => shared.cfg.delays.from_server_monitor,
    };
    rx.set_delay(
        delay,
        shared.cfg.seed ^ super::session_hash(&session_id) ^ role as u64,
    );

    loop {
        if !shared.running.load(Ordering::SeqCst) {
            return Ok(());
        }
        let unit = match rx.poll(shared.clock.now() + 0.25)? {
            Polled::Unit(u) => u,
            Polled::Timeout => continue,
            Polled::Closed => return Ok(()),
        };
        let msg = match wire::decode(&unit.bytes) {
            Ok((m, _)) => m,
            Err(e) => {
                let mut entry = entry.lock().expect("entry lock");
                let outs = entry
                    .audit
                    .on_protocol_error(format!("undecodable frame: {e}"), unit.at);
                entry.dispatch(outs, &session_id, &shared.counters);
                continue;
            }
        };
        shared.counters.add_control(unit.bytes.len());
        let mut e = entry.lock().expect("entry lock");
        let last = e.last_seq.get(role_key(role)).copied().unwrap_or(0);
        if msg.seq <= last {
            let outs = e.audit.on_protocol_error(
                format!("sequence number went backwards: {} after {last}", msg.seq),
                unit.at,
            );
            e.dispatch(outs, &session_id, &shared.counters);
            continue;
        }
        e.last_seq.insert(role_key(role), msg.seq);
        // Timers run on the service clock; the modeled arrival stamp only
        // orders the message within the session's history.
        let now = shared.clock.now().max(unit.at);
        let outs = match msg.body {
            Body::Notify { event } => match e.audit.on_client_event(msg.seq, event, now) {
                Ok(outs) => outs,
                // Late notifications after close or termination are noise.
                Err(_) => Vec::new(),
            },
            Body::Verdict { verdict, query } => e.audit.on_verdict(&query, verdict, now),
            Body::Reset {
                origin,
                new_start_pts,
            } => e.audit.on_reset(origin, new_start_pts, now),
            Body::Misbehavior { report } => e.audit.on_misbehavior(report, now),
            Body::Hello { .. } => Vec::new(),
            _ => e
                .audit
                .on_protocol_error("unexpected message kind from a monitor".into(), now),
        };
        e.dispatch(outs, &session_id, &shared.counters);
        if e.audit.state() != SessionState::Active {
            shared.persist(&session_id, &mut e);
        }
    }
}

fn role_key(role: Role) -> &'static str {
    match role {
        Role::ClientMonitor => "client",
        Role::ServerMonitor => "server",
    }
}
