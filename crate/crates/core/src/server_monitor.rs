//! Server-side monitor: ingests sniffed chunk metadata, maintains the
//! virtual buffer, and confirms or disputes client claims on the auditor's
//! request.
//!
//! The sniffer piece lives on the serving host and only forwards byte-range
//! metadata and timestamps; everything here runs in the core monitor, which
//! can sit on a different machine and host many sessions at once.
//!
//! A query that cannot be judged yet (the deciding acknowledgment or chunk
//! record has not arrived) is held rather than disputed: a pending ack can
//! still validate the claim, and disputing early would kill honest
//! sessions. If a held query is still undecidable when its hold budget
//! runs out, a `Deferred` verdict goes to the auditor, which restarts its
//! reply timer once.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::virtual_buffer::{
    must_confirm_rebuffering, rebuffering_upper_bound, BufferError, ChunkMap, VirtualBuffer,
    DEFAULT_INSERTION_ALLOWANCE_S, PTS_EPS,
};
use crate::wire::{MisbehaviorReport, MonitorQuery, SyncAction, Verdict};

/// One sniffed observation, stamped on the serving host.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnifferRecord {
    pub session_id: String,
    /// Server-clock timestamp: send start for served chunks, arrival for acks.
    pub at: f64,
    pub kind: SnifferKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dir", rename_all = "snake_case")]
pub enum SnifferKind {
    ServedChunk { byte_range: (u64, u64) },
    ClientAck { chunk_id: u64 },
}

/// Tunables agreed at bootstrap or set by configuration, not protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    /// Allowance `c` for the client's chunk-insertion delay, seconds.
    pub insertion_allowance_s: f64,
    /// Delayed-ack detection: bitrate-to-throughput ratio that flags.
    pub theta: f64,
    /// Delayed-ack detection: completed chunks per observation window.
    pub ack_window_chunks: usize,
    /// How long a not-yet-decidable query is held before a Deferred verdict
    /// is sent, in session seconds.
    pub hold_s: f64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            insertion_allowance_s: DEFAULT_INSERTION_ALLOWANCE_S,
            theta: 2.0,
            ack_window_chunks: 10,
            hold_s: 1.0,
        }
    }
}

/// What the monitor wants sent to the auditor.
#[derive(Debug, Clone, PartialEq)]
pub enum MonitorOutput {
    Verdict {
        query: MonitorQuery,
        verdict: Verdict,
    },
    Misbehavior(MisbehaviorReport),
    /// An out-of-order request was sniffed; the buffer was wiped and the
    /// auditor must hear about it.
    ResetDetected {
        new_start_pts: f64,
    },
}

/// The server's accounting for a closed window, kept for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerWindowStats {
    pub window_index: u64,
    pub start_pts: f64,
    pub end_pts: f64,
    pub played_s: Vec<(String, f64)>,
    pub rebuffer_count: u32,
}

#[derive(Debug)]
struct HeldQuery {
    query: MonitorQuery,
    deadline: f64,
    deferred_sent: bool,
}

#[derive(Debug, Default)]
struct AckWindow {
    /// (bytes, delivery_s, length_s) of recently completed chunks.
    completed: VecDeque<(u64, f64, f64)>,
}

/// Per-session state of the server monitor.
#[derive(Debug)]
pub struct SessionMonitor {
    map: Arc<ChunkMap>,
    cfg: MonitorConfig,
    vb: VirtualBuffer,
    window_start_pts: f64,
    held: Vec<HeldQuery>,
    ack_window: AckWindow,
    misbehavior_reported: bool,
    /// pts (in microseconds) of rebufferings this monitor has confirmed.
    confirmed_rebuffer_pts: BTreeSet<i64>,
    window_stats: Vec<ServerWindowStats>,
}

enum Evaluation {
    Ready(Verdict),
    NotYet,
}

fn pts_key(pts: f64) -> i64 {
    (pts * 1e6).round() as i64
}

impl SessionMonitor {
    pub fn new(map: Arc<ChunkMap>, cfg: MonitorConfig) -> Self {
        Self {
            map,
            cfg,
            vb: VirtualBuffer::new(),
            window_start_pts: 0.0,
            held: Vec::new(),
            ack_window: AckWindow::default(),
            misbehavior_reported: false,
            confirmed_rebuffer_pts: BTreeSet::new(),
            window_stats: Vec::new(),
        }
    }

    pub fn buffer(&self) -> &VirtualBuffer {
        &self.vb
    }

    pub fn window_stats(&self) -> &[ServerWindowStats] {
        &self.window_stats
    }

    /// Ingests one sniffed record. Served chunks drive the virtual buffer;
    /// a non-contiguous chunk is the out-of-order signal: the buffer is
    /// wiped, the chunk re-appended as the start of a fresh sequence, and
    /// the auditor notified.
    pub fn ingest(&mut self, rec: &SnifferRecord) -> Result<Vec<MonitorOutput>, BufferError> {
        let mut out = Vec::new();
        match &rec.kind {
            SnifferKind::ServedChunk { byte_range } => {
                match self.vb.on_chunk_sent(&self.map, *byte_range, rec.at) {
                    Ok(_) => {}
                    Err(BufferError::NonContiguousPts { .. }) => {
                        self.vb.reset();
                        self.ack_window.completed.clear();
                        let chunk = self.vb.on_chunk_sent(&self.map, *byte_range, rec.at)?;
                        let new_start = chunk.pts;
                        self.window_start_pts = new_start;
                        out.push(MonitorOutput::ResetDetected {
                            new_start_pts: new_start,
                        });
                    }
                    Err(e) => return Err(e),
                }
            }
            SnifferKind::ClientAck { chunk_id } => {
                self.vb.on_ack(*chunk_id, rec.at)?;
                let chunk = self.vb.find(*chunk_id).expect("just acked");
                let bytes = chunk.byte_range.1 - chunk.byte_range.0;
                let delivery = chunk.t_ack.expect("just acked") - chunk.t_send;
                let length = chunk.length_s;
                self.ack_window
                    .completed
                    .push_back((bytes, delivery, length));
                while self.ack_window.completed.len() > self.cfg.ack_window_chunks {
                    self.ack_window.completed.pop_front();
                }
                if let Some(report) = self.detect_delayed_acks() {
                    self.misbehavior_reported = true;
                    out.push(MonitorOutput::Misbehavior(report));
                }
            }
        }
        out.extend(self.retry_held(rec.at));
        Ok(out)
    }

    /// Flags the session when the acks imply a congestion level that the
    /// stream of confirmed chunks exceeds by the configured factor: a
    /// client slowing its acks without also requesting lower-bitrate chunks
    /// is lying about its network.
    fn detect_delayed_acks(&self) -> Option<MisbehaviorReport> {
        if self.misbehavior_reported {
            return None;
        }
        let w = &self.ack_window.completed;
        if w.len() < self.cfg.ack_window_chunks {
            return None;
        }
        let total_bits: f64 = w.iter().map(|&(b, _, _)| b as f64 * 8.0).sum();
        let total_delivery: f64 = w.iter().map(|&(_, d, _)| d).sum();
        let total_length: f64 = w.iter().map(|&(_, _, l)| l).sum();
        if total_delivery <= 0.0 || total_length <= 0.0 {
            return None;
        }
        let ack_throughput = total_bits / total_delivery;
        let consumed_bitrate = total_bits / total_length;
        let ratio = consumed_bitrate / ack_throughput;
        if ratio >= self.cfg.theta {
            Some(MisbehaviorReport {
                window_chunks: w.len(),
                ack_throughput_bps: ack_throughput,
                consumed_bitrate_bps: consumed_bitrate,
                ratio,
                detail: "delayed acknowledgments without bitrate adaptation".into(),
            })
        } else {
            None
        }
    }

    /// Answers an auditor query, or holds it when the deciding records have
    /// not arrived yet.
    pub fn answer_query(&mut self, query: MonitorQuery, now: f64) -> Vec<MonitorOutput> {
        match self.evaluate(&query, now) {
            Evaluation::Ready(verdict) => {
                self.note_confirmation(&query, &verdict);
                vec![MonitorOutput::Verdict { query, verdict }]
            }
            Evaluation::NotYet => {
                self.held.push(HeldQuery {
                    deadline: now + self.cfg.hold_s,
                    deferred_sent: false,
                    query,
                });
                Vec::new()
            }
        }
    }

    /// Re-examines held queries; called after every ingest and on timer
    /// ticks so that hold deadlines fire even on a quiet stream.
    pub fn tick(&mut self, now: f64) -> Vec<MonitorOutput> {
        self.retry_held(now)
    }

    fn retry_held(&mut self, now: f64) -> Vec<MonitorOutput> {
        let mut out = Vec::new();
        let mut remaining = Vec::new();
        for mut held in self.held.drain(..) {
            match Self::evaluate_inner(
                &self.vb,
                &self.cfg,
                &self.confirmed_rebuffer_pts,
                &held.query,
                now,
            ) {
                Evaluation::Ready(verdict) => out.push(MonitorOutput::Verdict {
                    query: held.query,
                    verdict,
                }),
                Evaluation::NotYet => {
                    if now >= held.deadline && !held.deferred_sent {
                        held.deferred_sent = true;
                        out.push(MonitorOutput::Verdict {
                            query: held.query.clone(),
                            verdict: Verdict::Deferred,
                        });
                    }
                    remaining.push(held);
                }
            }
        }
        self.held = remaining;
        for o in &out {
            if let MonitorOutput::Verdict { query, verdict } = o {
                self.note_confirmation(query, verdict);
            }
        }
        out
    }

    fn note_confirmation(&mut self, query: &MonitorQuery, verdict: &Verdict) {
        if !matches!(verdict, Verdict::Confirm { .. }) {
            return;
        }
        match query {
            MonitorQuery::ConfirmRebuffering { pts, .. } => {
                self.confirmed_rebuffer_pts.insert(pts_key(*pts));
            }
            MonitorQuery::ConfirmWindowEnd {
                window_index,
                start_pts,
                end_pts,
                ..
            } => {
                let played = self
                    .vb
                    .played_seconds_in_window(*start_pts, *end_pts)
                    .into_iter()
                    .collect();
                self.window_stats.push(ServerWindowStats {
                    window_index: *window_index,
                    start_pts: *start_pts,
                    end_pts: *end_pts,
                    played_s: played,
                    rebuffer_count: self.rebuffers_in(*start_pts, *end_pts),
                });
            }
            _ => {}
        }
    }

    fn rebuffers_in(&self, start_pts: f64, end_pts: f64) -> u32 {
        let lo = pts_key(start_pts);
        let hi = pts_key(end_pts);
        if end_pts <= start_pts {
            return 0;
        }
        self.confirmed_rebuffer_pts.range(lo..hi).count() as u32
    }

    fn evaluate(&self, query: &MonitorQuery, now: f64) -> Evaluation {
        Self::evaluate_inner(
            &self.vb,
            &self.cfg,
            &self.confirmed_rebuffer_pts,
            query,
            now,
        )
    }

    fn evaluate_inner(
        vb: &VirtualBuffer,
        cfg: &MonitorConfig,
        confirmed_rebuffer_pts: &BTreeSet<i64>,
        query: &MonitorQuery,
        now: f64,
    ) -> Evaluation {
        use Evaluation::*;
        let beyond_served = |pts: f64| vb.end_pts().map_or(true, |end| pts > end + PTS_EPS);
        match query {
            MonitorQuery::ConfirmRebuffering {
                pts,
                claimed_duration_s,
            } => {
                let a = match vb.chunk_ending_at(*pts) {
                    Some(a) => a,
                    None if beyond_served(*pts) => return NotYet,
                    None => {
                        return Ready(Verdict::Dispute {
                            reason: format!("no served chunk ends at pts {pts}"),
                        })
                    }
                };
                match vb.successor(a.chunk_id) {
                    Some(b) if b.t_ack.is_some() => {
                        let confirms = must_confirm_rebuffering(a, b).expect("b is acked");
                        if !confirms {
                            return Ready(Verdict::Dispute {
                                reason: format!(
                                    "chunk {} acknowledged before the expected end of chunk {}",
                                    b.chunk_id, a.chunk_id
                                ),
                            });
                        }
                        let bound = rebuffering_upper_bound(a, b, cfg.insertion_allowance_s)
                            .expect("b is acked");
                        match claimed_duration_s {
                            Some(d) if *d > bound + 1e-9 => Ready(Verdict::Dispute {
                                reason: format!(
                                    "claimed duration {d:.6} s exceeds the upper bound {bound:.6} s"
                                ),
                            }),
                            _ => Ready(Verdict::Confirm {
                                upper_bound_s: Some(bound),
                            }),
                        }
                    }
                    _ => {
                        // The deciding ack is still outstanding. A stall
                        // claim with no duration can already be confirmed
                        // once the expected end of A has passed: any future
                        // ack for B will land after it.
                        if claimed_duration_s.is_none() && now >= a.t_send + a.length_s {
                            Ready(Verdict::Confirm {
                                upper_bound_s: None,
                            })
                        } else {
                            NotYet
                        }
                    }
                }
            }
            MonitorQuery::ConfirmResolutionChange { pts, resolution } => {
                // The chunk *starting* at `pts` is on record only once the
                // served range extends past it; at the frontier the claim
                // must wait for the sniffer, not be disputed.
                let not_served_yet = |p: f64| vb.end_pts().map_or(true, |end| p >= end - PTS_EPS);
                let chunk = match vb.chunk_starting_at(*pts) {
                    Some(c) => c,
                    None if not_served_yet(*pts) => return NotYet,
                    None => {
                        return Ready(Verdict::Dispute {
                            reason: format!("no served chunk starts at pts {pts}"),
                        })
                    }
                };
                match vb.predecessor(chunk.chunk_id) {
                    Some(prev)
                        if chunk.resolution == *resolution
                            && prev.resolution != chunk.resolution =>
                    {
                        Ready(Verdict::Confirm {
                            upper_bound_s: None,
                        })
                    }
                    Some(_) => Ready(Verdict::Dispute {
                        reason: format!(
                            "served resolution at pts {pts} is {} and its predecessor {}",
                            chunk.resolution,
                            vb.predecessor(chunk.chunk_id)
                                .map(|p| p.resolution.as_str())
                                .unwrap_or("?")
                        ),
                    }),
                    None => Ready(Verdict::Dispute {
                        reason: format!("chunk at pts {pts} has no predecessor on record"),
                    }),
                }
            }
            MonitorQuery::ConfirmViolation {
                window_start_pts,
                through_pts,
                changes,
                ..
            } => {
                if beyond_served(*through_pts) {
                    return NotYet;
                }
                let ours = vb.change_list(*window_start_pts, *through_pts);
                if change_lists_equal(&ours, changes) {
                    Ready(Verdict::Confirm {
                        upper_bound_s: None,
                    })
                } else {
                    Ready(Verdict::Dispute {
                        reason: format!(
                            "window change lists disagree: server saw {}, client claims {}",
                            ours.len(),
                            changes.len()
                        ),
                    })
                }
            }
            MonitorQuery::ConfirmWindowEnd {
                start_pts,
                end_pts,
                played_s,
                rebuffer_count,
                ..
            } => {
                if *end_pts > *start_pts && beyond_served(*end_pts) {
                    return NotYet;
                }
                let ours = vb.played_seconds_in_window(*start_pts, *end_pts);
                let claimed: std::collections::BTreeMap<String, f64> =
                    played_s.iter().cloned().collect();
                if ours.len() != claimed.len()
                    || ours
                        .iter()
                        .any(|(k, v)| claimed.get(k).map_or(true, |cv| (cv - v).abs() > 1e-6))
                {
                    return Ready(Verdict::Dispute {
                        reason: "window playback accounting disagrees".into(),
                    });
                }
                let lo = pts_key(*start_pts);
                let hi = pts_key(*end_pts);
                let ours_rebuf = if end_pts <= start_pts {
                    0
                } else {
                    confirmed_rebuffer_pts.range(lo..hi).count() as u32
                };
                if ours_rebuf != *rebuffer_count {
                    return Ready(Verdict::Dispute {
                        reason: format!(
                            "window rebuffering count disagrees: server confirmed {ours_rebuf}, client claims {rebuffer_count}"
                        ),
                    });
                }
                Ready(Verdict::Confirm {
                    upper_bound_s: None,
                })
            }
        }
    }

    /// Applies an auditor sync: window rolls trim the buffer, resets move
    /// the window anchor.
    pub fn on_sync(&mut self, action: &SyncAction) {
        match action {
            SyncAction::WindowRolled { next_start_pts, .. } => {
                self.window_start_pts = *next_start_pts;
                self.vb.trim_before_window(*next_start_pts);
            }
            SyncAction::ResetApplied { new_start_pts } => {
                self.window_start_pts = *new_start_pts;
                self.vb.trim_before_window(*new_start_pts);
            }
            _ => {}
        }
    }
}

fn change_lists_equal(a: &[(f64, String)], b: &[(f64, String)]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b.iter())
            .all(|((pa, ra), (pb, rb))| (pa - pb).abs() <= PTS_EPS && ra == rb)
}

/// One monitor process hosting any number of sessions keyed by id.
#[derive(Debug)]
pub struct ServerMonitor {
    map: Arc<ChunkMap>,
    cfg: MonitorConfig,
    sessions: HashMap<String, SessionMonitor>,
}

impl ServerMonitor {
    pub fn new(map: Arc<ChunkMap>, cfg: MonitorConfig) -> Self {
        Self {
            map,
            cfg,
            sessions: HashMap::new(),
        }
    }

    /// Session state, created lazily on first contact.
    pub fn session(&mut self, session_id: &str) -> &mut SessionMonitor {
        if !self.sessions.contains_key(session_id) {
            self.sessions.insert(
                session_id.to_string(),
                SessionMonitor::new(Arc::clone(&self.map), self.cfg.clone()),
            );
        }
        self.sessions.get_mut(session_id).expect("just inserted")
    }

    pub fn get(&self, session_id: &str) -> Option<&SessionMonitor> {
        self.sessions.get(session_id)
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }
}
