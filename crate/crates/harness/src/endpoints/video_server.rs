//! The dummy-payload video server with its metadata sniffer.
//!
//! Each accepted connection serves one session: the first unit is the
//! client's request, the reply carries the bootstrap headers when both
//! sides participate, then chunks go out at exactly the trace's send
//! times. The sniffer rides in the same handler: right as each chunk send
//! starts, and as each acknowledgment arrives, a metadata record goes to
//! the server-monitor core. Payload never leaves the serving host twice;
//! only byte ranges and timestamps do.

use std::collections::HashMap;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use ugovor_core::server_monitor::{SnifferKind, SnifferRecord};
use ugovor_core::wire::{bootstrap_response_headers, request_proposes};
use ugovor_core::Contract;

use crate::clock::SessionClock;
use crate::trace::TraceSession;
use crate::transport::{split, Counters, LinkDelay, Polled, UnitSender};
use crate::video::{decode_unit, dummy_body, encode_unit, VideoFrame};

pub struct VideoServerConfig {
    /// Whether this server participates in monitoring at all.
    pub ugovor: bool,
    pub contract_text: String,
    pub auditor_addr: String,
    /// Sniffer-to-core destination; required when `ugovor` is set.
    pub sniffer_addr: Option<SocketAddr>,
    pub seed: u64,
    /// Listen address; loopback-ephemeral when unset.
    pub listen: Option<String>,
}

struct Shared {
    clock: SessionClock,
    cfg: VideoServerConfig,
    contract: Option<Contract>,
    traces: HashMap<String, Arc<TraceSession>>,
    counters: Counters,
    running: AtomicBool,
}

pub struct VideoServer {
    pub addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl VideoServer {
    pub fn spawn(
        clock: SessionClock,
        traces: &[TraceSession],
        cfg: VideoServerConfig,
        counters: Counters,
    ) -> std::io::Result<Self> {
        let listener = TcpListener::bind(cfg.listen.as_deref().unwrap_or("127.0.0.1:0"))?;
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let contract = if cfg.ugovor {
            Some(Contract::parse(&cfg.contract_text).map_err(|e| {
                std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string())
            })?)
        } else {
            None
        };
        let shared = Arc::new(Shared {
            clock,
            cfg,
            contract,
            traces: traces
                .iter()
                .map(|t| (t.session_id.clone(), Arc::new(t.clone())))
                .collect(),
            counters,
            running: AtomicBool::new(true),
        });
        let mut threads = Vec::new();
        {
            let shared = Arc::clone(&shared);
            threads.push(std::thread::spawn(move || accept_loop(listener, shared)));
        }
        Ok(Self {
            addr,
            shared,
            threads,
        })
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
                    let _ = serve_session(stream, shared);
                });
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(std::time::Duration::from_millis(5));
            }
            Err(_) => break,
        }
    }
}

fn serve_session(stream: TcpStream, shared: Arc<Shared>) -> std::io::Result<()> {
    let (mut tx, mut rx) = split(stream, &shared.clock, None, 0)?;

    // First unit: the request.
    let request = loop {
        match rx.poll(shared.clock.now() + 1.0)? {
            Polled::Unit(u) => break u,
            Polled::Timeout => {
                if !shared.running.load(Ordering::SeqCst) {
                    return Ok(());
                }
            }
            Polled::Closed => return Ok(()),
        }
    };
    let (frame, _) = match decode_unit(&request.bytes) {
        Ok(f) => f,
        Err(_) => return Ok(()),
    };
    let (path, req_headers) = match frame {
        VideoFrame::Request { path, headers } => (path, headers),
        _ => return Ok(()),
    };
    let session_id = path.strip_prefix("/video/").unwrap_or(&path).to_string();
    let trace = match shared.traces.get(&session_id) {
        Some(t) => Arc::clone(t),
        None => {
            let unit = encode_unit(
                &VideoFrame::Response {
                    status: 404,
                    headers: Vec::new(),
                },
                &[],
            );
            let _ = tx.send(&unit);
            return Ok(());
        }
    };

    // Acks ride the client's uplink.
    rx.set_delay(
        Some(LinkDelay::new(
            trace.latency.up_base_ms / 1000.0,
            trace.latency.up_jitter_ms / 1000.0,
        )),
        shared.cfg.seed ^ super::session_hash(&session_id) ^ 0x75,
    );

    // The sniffer recognizes the propose header and arms the bootstrap.
    let engage = shared.cfg.ugovor && request_proposes(&req_headers);
    let resp_headers = if engage {
        bootstrap_response_headers(
            shared.contract.as_ref().expect("participating server"),
            &shared.cfg.auditor_addr,
        )
    } else {
        Vec::new()
    };
    let response = encode_unit(
        &VideoFrame::Response {
            status: 200,
            headers: resp_headers,
        },
        &[],
    );
    shared
        .counters
        .video_meta_bytes
        .fetch_add(response.len() as u64, Ordering::Relaxed);
    tx.send(&response)?;

    let mut sniffer = match (engage, shared.cfg.sniffer_addr) {
        (true, Some(addr)) => {
            let stream = TcpStream::connect(addr)?;
            Some(UnitSender::new(stream, shared.clock.clone()))
        }
        _ => None,
    };
    let sniff = |rec: &SnifferRecord, sniffer: &mut Option<UnitSender>| {
        if let Some(s) = sniffer {
            let bytes = serde_json::to_vec(rec).expect("records serialize");
            shared.counters.add_control(bytes.len());
            let _ = s.send(&bytes);
        }
    };

    // The schedule is anchored at request processing time.
    let epoch = shared.clock.now();
    let total_chunks = trace.chunks.len() as u64;
    let mut acked = 0u64;
    let poll_acks = |rx: &mut crate::transport::UnitReceiver,
                     until: f64,
                     acked: &mut u64,
                     sniffer: &mut Option<UnitSender>|
     -> std::io::Result<bool> {
        loop {
            if shared.clock.now() >= until {
                return Ok(true);
            }
            match rx.poll(until)? {
                Polled::Unit(u) => {
                    if let Ok((VideoFrame::Ack { chunk_id }, _)) = decode_unit(&u.bytes) {
                        sniff(
                            &SnifferRecord {
                                session_id: session_id.clone(),
                                at: u.at,
                                kind: SnifferKind::ClientAck { chunk_id },
                            },
                            sniffer,
                        );
                        *acked += 1;
                    }
                }
                Polled::Timeout => return Ok(true),
                Polled::Closed => return Ok(false),
            }
        }
    };

    for chunk in &trace.chunks {
        let send_at = epoch + chunk.t_send;
        loop {
            let now = shared.clock.now();
            if now >= send_at {
                break;
            }
            if !poll_acks(&mut rx, send_at.min(now + 0.5), &mut acked, &mut sniffer)? {
                return Ok(()); // client went away
            }
            if !shared.running.load(Ordering::SeqCst) {
                return Ok(());
            }
        }
        let t_send = shared.clock.now();
        sniff(
            &SnifferRecord {
                session_id: session_id.clone(),
                at: t_send,
                kind: SnifferKind::ServedChunk {
                    byte_range: chunk.byte_range,
                },
            },
            &mut sniffer,
        );
        let body_len = (chunk.byte_range.1 - chunk.byte_range.0) as usize;
        let unit = encode_unit(
            &VideoFrame::Chunk {
                chunk_id: chunk.chunk_id,
                byte_range: chunk.byte_range,
                resolution: chunk.resolution.clone(),
                pts: chunk.pts,
                length_s: chunk.length_s,
                body_len: body_len as u64,
            },
            &dummy_body(chunk.chunk_id, body_len),
        );
        shared
            .counters
            .video_meta_bytes
            .fetch_add((unit.len() - body_len) as u64, Ordering::Relaxed);
        shared
            .counters
            .payload_bytes
            .fetch_add(body_len as u64, Ordering::Relaxed);
        shared.counters.chunks_sent.fetch_add(1, Ordering::Relaxed);
        if tx.send(&unit).is_err() {
            return Ok(());
        }
    }

    let end = encode_unit(&VideoFrame::End, &[]);
    shared
        .counters
        .video_meta_bytes
        .fetch_add(end.len() as u64, Ordering::Relaxed);
    let _ = tx.send(&end);

    // Drain the remaining acknowledgments.
    let deadline = shared.clock.now() + 30.0;
    while acked < total_chunks && shared.clock.now() < deadline {
        if !poll_acks(&mut rx, shared.clock.now() + 0.5, &mut acked, &mut sniffer)? {
            break;
        }
        if !shared.running.load(Ordering::SeqCst) {
            break;
        }
    }
    Ok(())
}
