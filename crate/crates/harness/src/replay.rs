//! Replay orchestration: spawns the auditor, server monitor, and video
//! server, then drives every session through a bounded pool of client
//! threads and assembles the per-session reports.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use ugovor_core::auditor::{AuditorConfig, SessionState};
use ugovor_core::server_monitor::MonitorConfig;
use ugovor_core::wire::ClientEvent;

use crate::clock::SessionClock;
use crate::endpoints::auditor_service::{AuditorService, AuditorServiceConfig, InboundDelays};
use crate::endpoints::client::{run_client, CapturedBytes, ClientConfig};
use crate::endpoints::monitor_service::{MonitorService, MonitorServiceConfig};
use crate::endpoints::video_server::{VideoServer, VideoServerConfig};
use crate::faults::FaultScript;
use crate::report::{audit_facts, windows_agree, ReplayTotals, SessionReport};
use crate::trace::{chunk_map_for, LatencyProfile, TraceSession, INSERTION_DELAY_S};
use crate::transport::{ByteCounters, LinkDelay};

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Trace(#[from] crate::trace::TraceError),
    #[error("contract: {0}")]
    Contract(#[from] ugovor_core::contract::ContractError),
}

#[derive(Debug, Clone)]
pub struct ReplayOptions {
    /// Wall seconds per session second (time compression), in (0, 1].
    pub time_scale: f64,
    /// Seed for latency jitter; corpus determinism depends on it.
    pub seed: u64,
    /// Concurrent sessions in flight.
    pub concurrency: usize,
    pub ugovor_client: bool,
    pub ugovor_server: bool,
    pub faults: Vec<FaultScript>,
    /// Overrides every session's trace latency profile when set.
    pub latency_override: Option<LatencyProfile>,
    pub monitor_cfg: MonitorConfig,
    pub auditor_cfg: AuditorConfig,
    pub insertion_delay_s: f64,
    pub startup_fill_s: f64,
    /// Capture inner video-channel bytes per session (memory-heavy; meant
    /// for single-session comparisons).
    pub capture_video_bytes: bool,
    /// Strip wall-derived quantities from the reports.
    pub deterministic_report: bool,
    /// Directory for persisted audit logs, if wanted.
    pub log_dir: Option<std::path::PathBuf>,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self {
            time_scale: 1.0,
            seed: 1,
            concurrency: 8,
            ugovor_client: true,
            ugovor_server: true,
            faults: Vec::new(),
            latency_override: None,
            monitor_cfg: MonitorConfig::default(),
            auditor_cfg: AuditorConfig::default(),
            insertion_delay_s: INSERTION_DELAY_S,
            startup_fill_s: crate::trace::STARTUP_FILL_S,
            capture_video_bytes: false,
            deterministic_report: false,
            log_dir: None,
        }
    }
}

#[derive(Debug)]
pub struct ReplayOutcome {
    pub sessions: Vec<SessionReport>,
    pub totals: ReplayTotals,
    /// Captured video-channel bytes per session, when enabled.
    pub captured: HashMap<String, CapturedBytes>,
}

pub fn replay(
    traces: &[TraceSession],
    contract_text: &str,
    opts: &ReplayOptions,
) -> Result<ReplayOutcome, ReplayError> {
    // All parties compare the agreement by its canonical text.
    let contract_text = ugovor_core::Contract::parse(contract_text)?.canonical_text();
    let contract_text = contract_text.as_str();
    let clock = SessionClock::new(opts.time_scale);
    let counters = Arc::new(ByteCounters::default());
    let mut effective: Vec<TraceSession> = traces.to_vec();
    if let Some(profile) = opts.latency_override {
        for t in &mut effective {
            t.latency = profile;
        }
    }

    // Auditor inbound delays: client link per session profile, monitor
    // link on a short provider-side hop.
    let mut delays = InboundDelays {
        from_client: HashMap::new(),
        from_server_monitor: Some(LinkDelay::new(0.002, 0.001)),
    };
    for t in &effective {
        delays.from_client.insert(
            t.session_id.clone(),
            LinkDelay::new(
                t.latency.up_base_ms / 1000.0,
                t.latency.up_jitter_ms / 1000.0,
            ),
        );
    }

    let auditor = AuditorService::spawn(
        clock.clone(),
        AuditorServiceConfig {
            auditor_cfg: opts.auditor_cfg.clone(),
            log_dir: opts.log_dir.clone(),
            delays,
            seed: opts.seed,
            listen: None,
        },
        Arc::clone(&counters),
    )?;

    let monitor = if opts.ugovor_server {
        let map = Arc::new(chunk_map_for(&effective)?);
        Some(MonitorService::spawn(
            clock.clone(),
            map,
            MonitorServiceConfig {
                monitor_cfg: opts.monitor_cfg.clone(),
                auditor_addr: auditor.addr.to_string(),
                contract_text: contract_text.to_string(),
                control_delay: Some(LinkDelay::new(0.002, 0.001)),
                faults: opts.faults.clone(),
                seed: opts.seed,
                listen: None,
            },
            Arc::clone(&counters),
        )?)
    } else {
        None
    };

    let video = VideoServer::spawn(
        clock.clone(),
        &effective,
        VideoServerConfig {
            ugovor: opts.ugovor_server,
            contract_text: contract_text.to_string(),
            auditor_addr: auditor.addr.to_string(),
            sniffer_addr: monitor.as_ref().map(|m| m.sniffer_addr),
            seed: opts.seed,
            listen: None,
        },
        Arc::clone(&counters),
    )?;

    // Bounded client pool.
    let results: Arc<Mutex<Vec<crate::endpoints::client::ClientRunResult>>> =
        Arc::new(Mutex::new(Vec::new()));
    let next: Arc<AtomicUsize> = Arc::new(AtomicUsize::new(0));
    let sessions = Arc::new(effective);
    let workers: Vec<_> = (0..opts.concurrency.max(1))
        .map(|_| {
            let sessions = Arc::clone(&sessions);
            let next = Arc::clone(&next);
            let results = Arc::clone(&results);
            let clock = clock.clone();
            let counters = Arc::clone(&counters);
            let video_addr = video.addr;
            let cfg = ClientConfig {
                propose: opts.ugovor_client,
                insertion_delay_s: opts.insertion_delay_s,
                startup_fill_s: opts.startup_fill_s,
                faults: opts.faults.clone(),
                seed: opts.seed,
                capture_video_bytes: opts.capture_video_bytes,
                inject_latency: true,
            };
            std::thread::spawn(move || loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= sessions.len() {
                    return;
                }
                let trace = &sessions[idx];
                match run_client(&clock, trace, video_addr, &cfg, &counters) {
                    Ok(result) => results.lock().expect("results lock").push(result),
                    Err(_) => {
                        //连 endpoint failure is infrastructure, not protocol;
                        // surface it as an unengaged, unterminated husk.
                    }
                }
            })
        })
        .collect();
    for w in workers {
        let _ = w.join();
    }

    // Let in-flight verdicts, syncs, and log writes settle.
    std::thread::sleep(
        clock
            .wall_duration(1.0)
            .min(std::time::Duration::from_millis(400)),
    );

    let mut reports = Vec::new();
    let mut captured = HashMap::new();
    let by_id: HashMap<&str, &TraceSession> = sessions
        .iter()
        .map(|t| (t.session_id.as_str(), t))
        .collect();
    let mut results = Arc::try_unwrap(results)
        .map(|m| m.into_inner().expect("results lock"))
        .unwrap_or_default();
    results.sort_by(|a, b| a.session_id.cmp(&b.session_id));

    for result in results.drain(..) {
        let trace = by_id
            .get(result.session_id.as_str())
            .expect("result for a known session");
        let snapshot = auditor.session_snapshot(&result.session_id);
        let facts = snapshot
            .as_ref()
            .map(|(_, log)| audit_facts(log))
            .unwrap_or_else(|| audit_facts(&[]));
        let server_windows: Vec<_> = monitor
            .as_ref()
            .map(|m| m.window_stats(&result.session_id))
            .unwrap_or_default()
            .into_iter()
            .map(|w| ugovor_core::analytics::WindowRecord {
                window_index: w.window_index,
                start_pts: w.start_pts,
                end_pts: w.end_pts,
                final_level: None,
                exhausted: false,
                rebuffer_count: w.rebuffer_count,
                played_s: w.played_s,
            })
            .collect();
        let client_windows: Vec<_> = result
            .outcomes
            .iter()
            .map(|o| ugovor_core::analytics::WindowRecord {
                window_index: o.window_index,
                start_pts: o.start_pts,
                end_pts: o.end_pts,
                final_level: o.final_level,
                exhausted: o.exhausted,
                rebuffer_count: o.rebuffer_count,
                played_s: o.played_s.clone(),
            })
            .collect();

        let closed_cleanly = result.closed
            && snapshot
                .as_ref()
                .is_some_and(|(state, _)| *state == SessionState::Closed);
        let terminated = facts.terminated.clone().or(result.terminated.clone());
        let terminated_at = facts
            .terminated_at
            .map(|t| (t, facts.terminated_window.unwrap_or(0)));

        let detected: Vec<(f64, f64)> = result
            .events
            .iter()
            .filter(|e| !e.fabricated)
            .filter_map(|e| match &e.event {
                ClientEvent::Rebuffering {
                    pts,
                    duration_s: Some(d),
                } => Some((*pts, *d)),
                _ => None,
            })
            .collect();

        let ledgers_agree = terminated.is_none()
            && windows_agree(&client_windows, &facts.windows)
            && (server_windows.is_empty() || windows_agree(&client_windows, &server_windows));

        let mut report = SessionReport {
            session_id: result.session_id.clone(),
            group: trace.group.clone(),
            engaged: result.engaged,
            closed: closed_cleanly,
            terminated,
            terminated_at,
            events: result.events,
            windows: client_windows,
            auditor_windows: facts.windows,
            server_windows,
            bound_pairs: facts.bound_pairs,
            expected_rebuffers: trace
                .rebuffers
                .iter()
                .map(|r| (r.pts, r.duration_s))
                .collect(),
            detected_rebuffers: detected,
            confirmed_rebuffer_pts: facts.confirmed_rebuffer_pts,
            misbehavior_reports: facts.misbehavior_reports,
            max_messages_per_event: facts.max_messages_per_event,
            ledgers_agree,
            received_chunks: result.received_chunks,
        };
        if opts.deterministic_report {
            report.redact_timing();
        }
        if let Some(bytes) = result.captured {
            captured.insert(result.session_id.clone(), bytes);
        }
        reports.push(report);
    }

    let totals = ReplayTotals {
        sessions: reports.len(),
        terminated: reports.iter().filter(|r| r.terminated.is_some()).count(),
        closed: reports.iter().filter(|r| r.closed).count(),
        counters: counters.snapshot(),
    };

    video.shutdown();
    if let Some(m) = monitor {
        m.shutdown();
    }
    auditor.shutdown();

    Ok(ReplayOutcome {
        sessions: reports,
        totals,
        captured,
    })
}
