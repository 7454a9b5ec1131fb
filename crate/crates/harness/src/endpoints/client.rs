//! The emulated streaming client with its monitor.
//!
//! One thread per session: it requests the stream, bootstraps monitoring
//! from the response headers, feeds received chunks into the client
//! monitor, acknowledges each chunk after it fully arrives, reports events
//! to the auditor, and applies any scripted client-side dishonesty.

use std::net::{SocketAddr, TcpStream};
use std::sync::atomic::Ordering;
use std::sync::mpsc;

use ugovor_core::client_monitor::{ClientMonitor, StreamChunk, WindowOutcome};
use ugovor_core::contract::SessionLedger;
use ugovor_core::wire::{
    self, bootstrap_client, propose_header, Body, ClientEvent, Role, SyncAction, TerminateReason,
    WireMessage,
};

use crate::clock::SessionClock;
use crate::faults::{FabricatedKind, FaultBehavior, FaultScript};
use crate::trace::{TraceSession, INSERTION_DELAY_S};
use crate::transport::{split, Counters, LinkDelay, Polled, UnitSender};
use crate::video::{decode_unit, encode_unit, VideoFrame};

pub struct ClientConfig {
    /// Whether the client proposes monitoring on its first request.
    pub propose: bool,
    pub insertion_delay_s: f64,
    pub startup_fill_s: f64,
    pub faults: Vec<FaultScript>,
    pub seed: u64,
    /// Capture the inner video-channel bytes for byte-level comparisons.
    pub capture_video_bytes: bool,
    /// Inject the trace's latency profile on inbound links. On for
    /// in-process replays; off when a real network sits in between.
    pub inject_latency: bool,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            propose: true,
            insertion_delay_s: INSERTION_DELAY_S,
            startup_fill_s: crate::trace::STARTUP_FILL_S,
            faults: Vec::new(),
            seed: 0,
            capture_video_bytes: false,
            inject_latency: true,
        }
    }
}

/// One event as the client saw it end to end.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ClientEventReport {
    pub seq: u64,
    pub event: ClientEvent,
    pub fabricated: bool,
    /// Settled by an auditor sync (confirmed by the server monitor).
    pub settled: bool,
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct CapturedBytes {
    pub sent: Vec<u8>,
    pub received: Vec<u8>,
}

/// Everything the client side knows at the end of its run.
#[derive(Debug)]
pub struct ClientRunResult {
    pub session_id: String,
    pub engaged: bool,
    pub events: Vec<ClientEventReport>,
    pub outcomes: Vec<WindowOutcome>,
    pub final_ledger: Option<SessionLedger>,
    pub terminated: Option<TerminateReason>,
    /// The auditor acknowledged a graceful close.
    pub closed: bool,
    pub ended: bool,
    pub captured: Option<CapturedBytes>,
    pub received_chunks: u64,
}

pub fn run_client(
    clock: &SessionClock,
    trace: &TraceSession,
    video_addr: SocketAddr,
    cfg: &ClientConfig,
    counters: &Counters,
) -> std::io::Result<ClientRunResult> {
    let session_id = trace.session_id.clone();
    let mut captured = cfg.capture_video_bytes.then(CapturedBytes::default);

    let stream = TcpStream::connect(video_addr)?;
    let (mut video_tx, mut video_rx) = split(stream, clock, None, 0)?;
    if cfg.inject_latency {
        video_rx.set_delay(
            Some(LinkDelay::new(
                trace.latency.down_base_ms / 1000.0,
                trace.latency.down_jitter_ms / 1000.0,
            )),
            cfg.seed ^ super::session_hash(&session_id) ^ 0xD0,
        );
    }

    let mut headers = Vec::new();
    if cfg.propose {
        headers.push(propose_header());
    }
    let request = encode_unit(
        &VideoFrame::Request {
            path: format!("/video/{session_id}"),
            headers,
        },
        &[],
    );
    counters
        .video_meta_bytes
        .fetch_add(request.len() as u64, Ordering::Relaxed);
    if let Some(c) = captured.as_mut() {
        c.sent.extend_from_slice(&request);
    }
    video_tx.send(&request)?;

    // The response decides whether monitoring engages.
    let response = loop {
        match video_rx.poll(clock.now() + 10.0)? {
            Polled::Unit(u) => break u,
            Polled::Timeout => continue,
            Polled::Closed => {
                return Ok(ClientRunResult {
                    session_id,
                    engaged: false,
                    events: Vec::new(),
                    outcomes: Vec::new(),
                    final_ledger: None,
                    terminated: None,
                    closed: false,
                    ended: false,
                    captured,
                    received_chunks: 0,
                })
            }
        }
    };
    if let Some(c) = captured.as_mut() {
        c.received.extend_from_slice(&response.bytes);
    }
    let resp_headers = match decode_unit(&response.bytes) {
        Ok((
            VideoFrame::Response {
                status: 200,
                headers,
            },
            _,
        )) => headers,
        _ => Vec::new(),
    };

    let engagement = if cfg.propose {
        // An invalid contract header means the monitor disengages; the
        // stream itself proceeds unmonitored.
        bootstrap_client(&resp_headers).unwrap_or(None)
    } else {
        None
    };

    let mut auditor: Option<AuditorLink> = match &engagement {
        Some(e) => Some(AuditorLink::connect(
            clock,
            &session_id,
            &e.auditor_addr,
            e.contract.canonical_text(),
            cfg.inject_latency.then_some(trace.latency),
            cfg.seed,
            counters,
        )?),
        None => None,
    };
    let mut monitor = engagement.as_ref().map(|e| {
        ClientMonitor::new(
            e.contract.clone(),
            cfg.insertion_delay_s,
            cfg.startup_fill_s,
        )
    });

    let mut faults: Vec<&FaultScript> = cfg
        .faults
        .iter()
        .filter(|f| f.behavior.client_side() && f.applies_to(&session_id))
        .collect();
    faults.sort_by(|a, b| a.activation_s.total_cmp(&b.activation_s));
    let mut fault_idx = 0usize;
    let mut ack_extra_delay = 0.0f64;

    let epoch = clock.now();
    let mut events: Vec<ClientEventReport> = Vec::new();
    let mut terminated: Option<TerminateReason> = None;
    let mut closed = false;
    let mut stream_ended = false;
    let mut video_closed = false;
    let mut received_chunks = 0u64;
    // The monitor's time horizon: receive stamps may never step backwards
    // past it, or a delayed write racing a playhead tick could fabricate
    // impossible (negative-duration) stalls.
    let mut monitor_horizon = 0.0f64;
    // Wall-clock style guard so a wedged session cannot hang the replay.
    let hard_deadline = epoch + trace.nominal_wall_s() * 2.0 + 120.0;

    loop {
        let now = clock.now();
        if now > hard_deadline {
            break;
        }

        // Scripted client-side dishonesty.
        while fault_idx < faults.len() && now >= epoch + faults[fault_idx].activation_s {
            let fault = faults[fault_idx];
            fault_idx += 1;
            match &fault.behavior {
                FaultBehavior::FabricateEvent { kind, pts } => {
                    let event = match kind {
                        FabricatedKind::Rebuffering => ClientEvent::Rebuffering {
                            pts: *pts,
                            duration_s: None,
                        },
                        FabricatedKind::ResolutionChange { resolution } => {
                            ClientEvent::ResolutionChange {
                                pts: *pts,
                                resolution: resolution.clone(),
                            }
                        }
                    };
                    if let Some(link) = auditor.as_mut() {
                        let seq = link.notify(&event, counters);
                        events.push(ClientEventReport {
                            seq,
                            event,
                            fabricated: true,
                            settled: false,
                        });
                    }
                }
                FaultBehavior::DelayAcks { extra_delay_s } => ack_extra_delay = *extra_delay_s,
                FaultBehavior::OneSidedReset { new_start_pts } => {
                    if let Some(link) = auditor.as_mut() {
                        link.send_body(
                            Body::Reset {
                                origin: Role::ClientMonitor,
                                new_start_pts: *new_start_pts,
                            },
                            counters,
                        );
                    }
                }
                _ => {}
            }
        }

        // Video channel.
        if !video_closed {
            match video_rx.poll(now + 0.05)? {
                Polled::Unit(u) => {
                    if let Some(c) = captured.as_mut() {
                        c.received.extend_from_slice(&u.bytes);
                    }
                    match decode_unit(&u.bytes) {
                        Ok((
                            VideoFrame::Chunk {
                                chunk_id,
                                resolution,
                                pts,
                                length_s,
                                body_len,
                                ..
                            },
                            body,
                        )) => {
                            debug_assert_eq!(body.len() as u64, body_len);
                            received_chunks += 1;
                            let t_recv = u.at.max(monitor_horizon);
                            monitor_horizon = t_recv;
                            if let Some(m) = monitor.as_mut() {
                                // An out-of-order chunk would start the
                                // reset path; the replay schedules are
                                // contiguous by construction.
                                let _ = m.on_chunk_received(
                                    StreamChunk {
                                        chunk_id,
                                        resolution,
                                        pts,
                                        length_s,
                                    },
                                    t_recv,
                                );
                            }
                            let ack = encode_unit(&VideoFrame::Ack { chunk_id }, &[]);
                            counters
                                .video_meta_bytes
                                .fetch_add(ack.len() as u64, Ordering::Relaxed);
                            counters.acks_sent.fetch_add(1, Ordering::Relaxed);
                            if let Some(c) = captured.as_mut() {
                                c.sent.extend_from_slice(&ack);
                            }
                            // The ack enters the modeled network at the
                            // modeled receive time, so host scheduling
                            // noise never masquerades as client delay.
                            let dispatch = t_recv + ack_extra_delay;
                            let _ = video_tx.send_at(&ack, dispatch);
                        }
                        Ok((VideoFrame::End, _)) => {
                            stream_ended = true;
                            monitor_horizon = monitor_horizon.max(u.at).max(clock.now());
                            if let Some(m) = monitor.as_mut() {
                                m.mark_stream_complete(monitor_horizon);
                            }
                        }
                        _ => {}
                    }
                }
                Polled::Timeout => {
                    monitor_horizon = monitor_horizon.max(clock.now());
                    if let Some(m) = monitor.as_mut() {
                        m.advance_to(monitor_horizon);
                    }
                }
                Polled::Closed => {
                    video_closed = true;
                    monitor_horizon = monitor_horizon.max(clock.now());
                    if let Some(m) = monitor.as_mut() {
                        if !stream_ended {
                            m.mark_stream_complete(monitor_horizon);
                        }
                    }
                }
            }
        } else {
            clock.sleep_s(0.05);
            monitor_horizon = monitor_horizon.max(clock.now());
            if let Some(m) = monitor.as_mut() {
                m.advance_to(monitor_horizon);
            }
        }

        // Detected events go out as notifications.
        if let (Some(m), Some(link)) = (monitor.as_mut(), auditor.as_mut()) {
            for event in m.take_events() {
                let seq = link.notify(&event, counters);
                events.push(ClientEventReport {
                    seq,
                    event,
                    fabricated: false,
                    settled: false,
                });
            }
        }

        // Auditor inbox.
        if let Some(link) = auditor.as_mut() {
            while let Ok(msg) = link.inbox.try_recv() {
                match msg.body {
                    Body::Sync { action } => match action {
                        SyncAction::Proceed { event_seq }
                        | SyncAction::Downgraded { event_seq, .. }
                        | SyncAction::WindowRolled { event_seq, .. } => {
                            if let Some(e) = events.iter_mut().find(|e| e.seq == event_seq) {
                                e.settled = true;
                            }
                        }
                        SyncAction::Closed => {
                            closed = true;
                            for e in events.iter_mut() {
                                if matches!(e.event, ClientEvent::WindowEnd { is_final: true, .. })
                                {
                                    e.settled = true;
                                }
                            }
                        }
                        SyncAction::ResetApplied { new_start_pts } => {
                            if let Some(m) = monitor.as_mut() {
                                m.reset_to(new_start_pts);
                            }
                        }
                    },
                    Body::Terminate { reason } => {
                        terminated = Some(reason);
                    }
                    _ => {}
                }
            }
        }

        if terminated.is_some() || closed {
            break;
        }
        if auditor.is_none() && video_closed {
            break;
        }
        // Otherwise: keep playing, or keep waiting for the auditor's close
        // of the final window, bounded by the hard deadline.
    }

    video_tx.shutdown();
    if let Some(link) = auditor.as_ref() {
        link.tx.shutdown();
    }

    let (final_ledger, outcomes, ended) = match monitor.as_ref() {
        Some(m) => (
            Some(m.ledger().clone()),
            m.outcomes().to_vec(),
            m.has_ended(),
        ),
        None => (None, Vec::new(), stream_ended),
    };
    Ok(ClientRunResult {
        session_id,
        engaged: engagement.is_some(),
        events,
        outcomes,
        final_ledger,
        terminated,
        closed,
        ended,
        captured,
        received_chunks,
    })
}

/// The client monitor's connection to the auditor.
struct AuditorLink {
    tx: UnitSender,
    session_id: String,
    seq: u64,
    inbox: mpsc::Receiver<WireMessage>,
}

impl AuditorLink {
    fn connect(
        clock: &SessionClock,
        session_id: &str,
        auditor_addr: &str,
        contract_text: String,
        latency: Option<crate::trace::LatencyProfile>,
        seed: u64,
        counters: &Counters,
    ) -> std::io::Result<Self> {
        let stream = TcpStream::connect(auditor_addr)?;
        let (tx, mut rx) = split(stream, clock, None, 0)?;
        if let Some(profile) = latency {
            rx.set_delay(
                Some(LinkDelay::new(
                    profile.down_base_ms / 1000.0,
                    profile.down_jitter_ms / 1000.0,
                )),
                seed ^ super::session_hash(session_id) ^ 0xA0,
            );
        }
        let (sender, receiver) = mpsc::channel();
        {
            let clock = clock.clone();
            // Exits when the socket closes: the main loop shuts the
            // stream down once the session is over.
            std::thread::spawn(move || loop {
                match rx.poll(clock.now() + 0.25) {
                    Ok(Polled::Unit(u)) => {
                        if let Ok((msg, _)) = wire::decode(&u.bytes) {
                            if sender.send(msg).is_err() {
                                return;
                            }
                        }
                    }
                    Ok(Polled::Timeout) => continue,
                    Ok(Polled::Closed) | Err(_) => return,
                }
            });
        }
        let mut link = Self {
            tx,
            session_id: session_id.to_string(),
            seq: 0,
            inbox: receiver,
        };
        link.send_body(
            Body::Hello {
                role: Role::ClientMonitor,
                contract_text,
            },
            counters,
        );
        Ok(link)
    }

    fn notify(&mut self, event: &ClientEvent, counters: &Counters) -> u64 {
        self.send_body(
            Body::Notify {
                event: event.clone(),
            },
            counters,
        )
    }

    fn send_body(&mut self, body: Body, counters: &Counters) -> u64 {
        self.seq += 1;
        let msg = WireMessage::new(&self.session_id, self.seq, body);
        if let Ok(frame) = wire::encode(&msg) {
            counters.add_control(frame.len());
            let _ = self.tx.send(&frame);
        }
        self.seq
    }
}
