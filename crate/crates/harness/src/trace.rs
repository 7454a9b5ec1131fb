//! Trace files and the synthetic corpus generator.
//!
//! A trace holds, per session, everything a replay needs: when each chunk
//! was sent, its byte range/resolution/pts/duration, when each ack arrived,
//! the client-side events the session is expected to produce, and the
//! latency profile to inject. The format is line-delimited JSON records
//! with an explicit version field; a converter for external trace sources
//! can target the same schema.
//!
//! The generator is the desk-scale substitute for a production dataset. It
//! builds send schedules on a nominal zero-latency timeline: chunks arrive
//! keeping a constant buffer lead, except around scripted stalls, where
//! the gap-ending chunk is withheld for exactly the scripted duration.
//! Because the lead is large against any injected latency, replays
//! reproduce exactly the scripted stall set.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distributions::Distribution;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use ugovor_core::analytics::SessionSummary;
use ugovor_core::virtual_buffer::{ChunkMap, ChunkMeta};

pub const TRACE_VERSION: u32 = 1;

/// Client insertion delay emulated in replays, seconds. Matches the
/// default allowance the monitors agree on.
pub const INSERTION_DELAY_S: f64 = ugovor_core::virtual_buffer::DEFAULT_INSERTION_ALLOWANCE_S;

/// Seconds of content the emulated player buffers before the first frame.
pub const STARTUP_FILL_S: f64 = 4.0;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Schema { line: usize, msg: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyProfile {
    pub up_base_ms: f64,
    pub up_jitter_ms: f64,
    pub down_base_ms: f64,
    pub down_jitter_ms: f64,
}

impl LatencyProfile {
    pub fn zero() -> Self {
        Self {
            up_base_ms: 0.0,
            up_jitter_ms: 0.0,
            down_base_ms: 0.0,
            down_jitter_ms: 0.0,
        }
    }

    /// Worst one-way delay in either direction, seconds.
    pub fn max_one_way_s(&self) -> f64 {
        ((self.up_base_ms + self.up_jitter_ms).max(self.down_base_ms + self.down_jitter_ms))
            / 1000.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledChunk {
    pub chunk_id: u64,
    /// Session time at which the server starts sending.
    pub t_send: f64,
    pub byte_range: (u64, u64),
    pub resolution: String,
    pub pts: f64,
    pub length_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduledAck {
    pub chunk_id: u64,
    pub t_ack: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpectedRebuffer {
    pub pts: f64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HealthSample {
    pub t: f64,
    pub buffer_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSession {
    pub session_id: String,
    pub group: String,
    pub start_offset_s: f64,
    pub latency: LatencyProfile,
    pub chunks: Vec<ScheduledChunk>,
    pub acks: Vec<ScheduledAck>,
    pub rebuffers: Vec<ExpectedRebuffer>,
    pub health: Vec<HealthSample>,
}

impl TraceSession {
    /// Presentation length of the session.
    pub fn video_s(&self) -> f64 {
        self.chunks.iter().map(|c| c.length_s).sum()
    }

    /// Wall length of the nominal session: content plus scripted stalls.
    pub fn nominal_wall_s(&self) -> f64 {
        self.video_s() + self.rebuffers.iter().map(|r| r.duration_s).sum::<f64>()
    }

    pub fn resolution_switches(&self) -> u32 {
        self.chunks
            .windows(2)
            .filter(|w| w[0].resolution != w[1].resolution)
            .count() as u32
    }

    fn validate(&self, line_of: impl Fn(&str) -> usize) -> Result<(), TraceError> {
        let err = |msg: String| TraceError::Schema {
            line: line_of(&self.session_id),
            msg,
        };
        if self.chunks.is_empty() {
            return Err(err("session has no chunks".into()));
        }
        for w in self.chunks.windows(2) {
            if w[1].t_send < w[0].t_send {
                return Err(err(format!(
                    "chunk {} sent before its predecessor",
                    w[1].chunk_id
                )));
            }
            let expected = w[0].pts + w[0].length_s;
            if (w[1].pts - expected).abs() > 1e-9 {
                return Err(err(format!(
                    "chunk {}: non-contiguous pts (expected {expected}, got {})",
                    w[1].chunk_id, w[1].pts
                )));
            }
        }
        for c in &self.chunks {
            if !(c.length_s > 0.0) || c.byte_range.0 >= c.byte_range.1 {
                return Err(err(format!("chunk {} has invalid geometry", c.chunk_id)));
            }
        }
        Ok(())
    }
}

/// One line of a trace file.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TraceRecord {
    Session {
        v: u32,
        session_id: String,
        group: String,
        start_offset_s: f64,
        latency: LatencyProfile,
    },
    Chunk {
        session_id: String,
        chunk_id: u64,
        t_send: f64,
        start: u64,
        end: u64,
        resolution: String,
        pts: f64,
        length_s: f64,
    },
    Ack {
        session_id: String,
        chunk_id: u64,
        t_ack: f64,
    },
    Event {
        session_id: String,
        event: String,
        pts: f64,
        duration_s: f64,
    },
    Health {
        session_id: String,
        t: f64,
        buffer_s: f64,
    },
}

pub fn save_traces(path: &Path, sessions: &[TraceSession]) -> Result<(), TraceError> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in sessions {
        let rec = TraceRecord::Session {
            v: TRACE_VERSION,
            session_id: s.session_id.clone(),
            group: s.group.clone(),
            start_offset_s: s.start_offset_s,
            latency: s.latency,
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("serializes"))?;
        for c in &s.chunks {
            let rec = TraceRecord::Chunk {
                session_id: s.session_id.clone(),
                chunk_id: c.chunk_id,
                t_send: c.t_send,
                start: c.byte_range.0,
                end: c.byte_range.1,
                resolution: c.resolution.clone(),
                pts: c.pts,
                length_s: c.length_s,
            };
            writeln!(w, "{}", serde_json::to_string(&rec).expect("serializes"))?;
        }
        for a in &s.acks {
            let rec = TraceRecord::Ack {
                session_id: s.session_id.clone(),
                chunk_id: a.chunk_id,
                t_ack: a.t_ack,
            };
            writeln!(w, "{}", serde_json::to_string(&rec).expect("serializes"))?;
        }
        for r in &s.rebuffers {
            let rec = TraceRecord::Event {
                session_id: s.session_id.clone(),
                event: "rebuffer".into(),
                pts: r.pts,
                duration_s: r.duration_s,
            };
            writeln!(w, "{}", serde_json::to_string(&rec).expect("serializes"))?;
        }
        for h in &s.health {
            let rec = TraceRecord::Health {
                session_id: s.session_id.clone(),
                t: h.t,
                buffer_s: h.buffer_s,
            };
            writeln!(w, "{}", serde_json::to_string(&rec).expect("serializes"))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_traces(path: &Path) -> Result<Vec<TraceSession>, TraceError> {
    let reader = BufReader::new(File::open(path)?);
    let mut order: Vec<String> = Vec::new();
    let mut sessions: BTreeMap<String, TraceSession> = BTreeMap::new();
    let mut session_line: BTreeMap<String, usize> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| TraceError::Schema {
            line: line_no,
            msg: e.to_string(),
        })?;
        match rec {
            TraceRecord::Session {
                v,
                session_id,
                group,
                start_offset_s,
                latency,
            } => {
                if v != TRACE_VERSION {
                    return Err(TraceError::Schema {
                        line: line_no,
                        msg: format!("unsupported trace version {v}"),
                    });
                }
                if sessions.contains_key(&session_id) {
                    return Err(TraceError::Schema {
                        line: line_no,
                        msg: format!("duplicate session {session_id}"),
                    });
                }
                order.push(session_id.clone());
                session_line.insert(session_id.clone(), line_no);
                sessions.insert(
                    session_id.clone(),
                    TraceSession {
                        session_id,
                        group,
                        start_offset_s,
                        latency,
                        chunks: Vec::new(),
                        acks: Vec::new(),
                        rebuffers: Vec::new(),
                        health: Vec::new(),
                    },
                );
            }
            TraceRecord::Chunk {
                session_id,
                chunk_id,
                t_send,
                start,
                end,
                resolution,
                pts,
                length_s,
            } => {
                let s = sessions.get_mut(&session_id).ok_or(TraceError::Schema {
                    line: line_no,
                    msg: format!("chunk for undeclared session {session_id}"),
                })?;
                s.chunks.push(ScheduledChunk {
                    chunk_id,
                    t_send,
                    byte_range: (start, end),
                    resolution,
                    pts,
                    length_s,
                });
            }
            TraceRecord::Ack {
                session_id,
                chunk_id,
                t_ack,
            } => {
                let s = sessions.get_mut(&session_id).ok_or(TraceError::Schema {
                    line: line_no,
                    msg: format!("ack for undeclared session {session_id}"),
                })?;
                s.acks.push(ScheduledAck { chunk_id, t_ack });
            }
            TraceRecord::Event {
                session_id,
                event,
                pts,
                duration_s,
            } => {
                let s = sessions.get_mut(&session_id).ok_or(TraceError::Schema {
                    line: line_no,
                    msg: format!("event for undeclared session {session_id}"),
                })?;
                if event != "rebuffer" {
                    return Err(TraceError::Schema {
                        line: line_no,
                        msg: format!("unknown event kind {event:?}"),
                    });
                }
                s.rebuffers.push(ExpectedRebuffer { pts, duration_s });
            }
            TraceRecord::Health {
                session_id,
                t,
                buffer_s,
            } => {
                let s = sessions.get_mut(&session_id).ok_or(TraceError::Schema {
                    line: line_no,
                    msg: format!("health sample for undeclared session {session_id}"),
                })?;
                s.health.push(HealthSample { t, buffer_s });
            }
        }
    }
    let result: Vec<TraceSession> = order
        .iter()
        .map(|id| sessions.remove(id).expect("declared"))
        .collect();
    for s in &result {
        s.validate(|id| session_line.get(id).copied().unwrap_or(0))?;
    }
    Ok(result)
}

/// Builds the server configuration map covering every chunk of a corpus.
/// Byte ranges are a function of (resolution, slot), so sessions streaming
/// the same content share entries.
pub fn chunk_map_for(sessions: &[TraceSession]) -> Result<ChunkMap, TraceError> {
    let mut map = ChunkMap::new();
    for s in sessions {
        for c in &s.chunks {
            map.insert(
                c.byte_range.0,
                c.byte_range.1,
                ChunkMeta {
                    resolution: c.resolution.clone(),
                    length_s: c.length_s,
                    pts: c.pts,
                },
            )
            .map_err(|e| TraceError::Schema {
                line: 0,
                msg: format!("session {}: {e}", s.session_id),
            })?;
        }
    }
    Ok(map)
}

/// Nominal per-session summary straight from the trace (no replay).
pub fn trace_summary(s: &TraceSession) -> SessionSummary {
    let mut timeline = Vec::new();
    for c in &s.chunks {
        match timeline.last_mut() {
            Some((_, to, res)) if *res == c.resolution => *to = c.pts + c.length_s,
            _ => timeline.push((c.pts, c.pts + c.length_s, c.resolution.clone())),
        }
    }
    SessionSummary {
        session_id: s.session_id.clone(),
        group: s.group.clone(),
        start_offset_s: s.start_offset_s,
        duration_s: s.nominal_wall_s(),
        resolution_switches: s.resolution_switches(),
        rebuffer_durations_s: s.rebuffers.iter().map(|r| r.duration_s).collect(),
        timeline,
        windows: Vec::new(),
        bound_pairs: Vec::new(),
        terminated: false,
    }
}

/// Resolution ladder entry: label and nominal bitrate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rung {
    pub label: String,
    pub bitrate_bps: f64,
}

/// Parameters for the synthetic corpus generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusParams {
    pub sessions: usize,
    /// Lognormal session length: median and sigma, clamped to the range.
    pub duration_median_s: f64,
    pub duration_sigma: f64,
    pub duration_min_s: f64,
    pub duration_max_s: f64,
    pub chunk_length_s: f64,
    /// Fraction of sessions that experience at least one rebuffering.
    pub rebuffer_session_fraction: f64,
    pub rebuffer_min_s: f64,
    pub rebuffer_max_s: f64,
    /// Median per-chunk-boundary switch probability (per-session jittered).
    pub switch_prob: f64,
    pub startup_burst_chunks: usize,
    /// Target buffered seconds ahead of the playhead in steady state.
    pub buffer_lead_s: f64,
    pub latency_min_ms: f64,
    pub latency_max_ms: f64,
    pub jitter_max_ms: f64,
    pub ladder: Vec<Rung>,
    pub groups: usize,
    /// Spread of session start offsets on the corpus timeline.
    pub start_spread_s: f64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            sessions: 384,
            duration_median_s: 60.0,
            duration_sigma: 0.4,
            duration_min_s: 24.0,
            duration_max_s: 180.0,
            chunk_length_s: 2.0,
            rebuffer_session_fraction: 0.125,
            rebuffer_min_s: 1.2,
            rebuffer_max_s: 8.0,
            switch_prob: 1.0 / 6.0,
            startup_burst_chunks: 3,
            buffer_lead_s: 4.0,
            latency_min_ms: 1.0,
            latency_max_ms: 300.0,
            jitter_max_ms: 30.0,
            ladder: vec![
                Rung {
                    label: "240p".into(),
                    bitrate_bps: 0.15e6,
                },
                Rung {
                    label: "360p".into(),
                    bitrate_bps: 0.3e6,
                },
                Rung {
                    label: "480p".into(),
                    bitrate_bps: 0.6e6,
                },
                Rung {
                    label: "720p".into(),
                    bitrate_bps: 1.5e6,
                },
                Rung {
                    label: "1080p".into(),
                    bitrate_bps: 3.0e6,
                },
            ],
            groups: 10,
            start_spread_s: 0.0,
        }
    }
}

impl CorpusParams {
    fn validate(&self) -> Result<(), TraceError> {
        let bad = |msg: &str| TraceError::InvalidParameters(msg.to_string());
        if self.sessions == 0 {
            return Err(bad("sessions must be positive"));
        }
        if !(self.chunk_length_s > 0.0) {
            return Err(bad("chunk length must be positive"));
        }
        if !(0.0..=1.0).contains(&self.rebuffer_session_fraction) {
            return Err(bad("rebuffer fraction must lie in [0, 1]"));
        }
        if self.ladder.is_empty() {
            return Err(bad("ladder must have at least one rung"));
        }
        if self.duration_min_s > self.duration_max_s
            || !(self.duration_min_s > 0.0)
            || self.rebuffer_min_s > self.rebuffer_max_s
        {
            return Err(bad("inconsistent duration bounds"));
        }
        if self.latency_min_ms > self.latency_max_ms || self.latency_min_ms < 0.0 {
            return Err(bad("inconsistent latency bounds"));
        }
        // Scripted stalls must dominate any timing drift that injected
        // latency can cause, or replays would not reproduce the event set.
        if self.rebuffer_min_s < 3.0 * self.latency_max_ms / 1000.0 {
            return Err(bad(
                "minimum rebuffer duration too small against the latency ceiling",
            ));
        }
        if self.buffer_lead_s < 6.0 * self.latency_max_ms / 1000.0 {
            return Err(bad("buffer lead too small against the latency ceiling"));
        }
        Ok(())
    }
}

/// Byte range of the chunk at `slot` on ladder rung `rung`: one address
/// space region per rung, one fixed-width slot per chunk position.
fn byte_range_for(rung: usize, slot: u64, size: u64) -> (u64, u64) {
    let base = (rung as u64) << 44;
    let start = base + (slot << 24);
    (start, start + size)
}

/// Deterministic per-(rung, slot) size wobble around the nominal bitrate.
fn chunk_size(params: &CorpusParams, rung: usize, slot: u64) -> u64 {
    let nominal = params.ladder[rung].bitrate_bps * params.chunk_length_s / 8.0;
    let h = (rung as u64)
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add(slot.wrapping_mul(0xD1B54A32D192ED03));
    let wobble = 0.9 + 0.2 * ((h >> 11) as f64 / (1u64 << 53) as f64);
    ((nominal * wobble).round() as u64).max(1024)
}

/// Generates a deterministic corpus: same parameters and seed, same bytes.
pub fn generate_synthetic(
    params: &CorpusParams,
    seed: u64,
) -> Result<Vec<TraceSession>, TraceError> {
    params.validate()?;
    let mut sessions = Vec::with_capacity(params.sessions);
    for i in 0..params.sessions {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ ((i as u64 + 1).wrapping_mul(0x9E3779B97F4A7C15)));
        sessions.push(generate_session(params, i, &mut rng));
    }
    Ok(sessions)
}

fn generate_session(params: &CorpusParams, index: usize, rng: &mut ChaCha8Rng) -> TraceSession {
    let chunk_len = params.chunk_length_s;
    let lognormal = rand::distributions::Uniform::new(-1.0f64, 1.0);
    // Box-Muller would do; a clipped sum of uniforms is close enough for a
    // duration spread and keeps the dependency surface small.
    let gauss: f64 = (0..6).map(|_| lognormal.sample(rng)).sum::<f64>() / 2.0;
    let duration = (params.duration_median_s * (params.duration_sigma * gauss).exp())
        .clamp(params.duration_min_s, params.duration_max_s);
    let n_chunks = ((duration / chunk_len).round() as usize).max(4);

    // Resolution walk, biased toward the upper rungs.
    let top = params.ladder.len() - 1;
    let mut rung = top.min(3);
    let switch_prob = (params.switch_prob * rng.gen_range(0.5..1.8)).clamp(0.0, 0.95);
    let mut rungs = Vec::with_capacity(n_chunks);
    rungs.push(rung);
    for _ in 1..n_chunks {
        if top > 0 && rng.gen_bool(switch_prob) {
            let up = if rung == 0 {
                true
            } else if rung == top {
                false
            } else {
                rng.gen_bool(0.55)
            };
            rung = if up { rung + 1 } else { rung - 1 };
        }
        rungs.push(rung);
    }

    // Scripted stalls: which chunk boundary the player runs dry at.
    let mut stall_after: BTreeMap<usize, f64> = BTreeMap::new();
    if rng.gen_bool(params.rebuffer_session_fraction) {
        let count = match rng.gen_range(0..10) {
            0..=3 => 1,
            4..=7 => 2,
            _ => 3,
        };
        let lo = params.startup_burst_chunks.max(2);
        let hi = n_chunks.saturating_sub(2);
        if hi > lo {
            for _ in 0..count {
                let k = rng.gen_range(lo..hi);
                if (k.saturating_sub(3)..=k + 3).any(|j| stall_after.contains_key(&j)) {
                    continue;
                }
                let d = rng.gen_range(params.rebuffer_min_s..=params.rebuffer_max_s);
                stall_after.insert(k, d);
            }
        }
    }

    // Nominal timeline: playback starts one insertion delay after the
    // startup fill is buffered; wall(pts) shifts by each stall's duration.
    let fill_chunks = ((STARTUP_FILL_S / chunk_len).ceil() as usize).max(1);
    let burst = params
        .startup_burst_chunks
        .max(fill_chunks)
        .min(n_chunks)
        .max(1);
    let play_epoch = (fill_chunks.min(n_chunks) - 1) as f64 * 0.05 + INSERTION_DELAY_S;
    let mut stall_shift = 0.0;
    let mut chunks = Vec::with_capacity(n_chunks);
    let mut acks = Vec::with_capacity(n_chunks);
    let mut rebuffers = Vec::new();
    let mut last_send = 0.0f64;
    let nominal_rtt = 2.0 * (params.latency_min_ms + params.latency_max_ms) / 2.0 / 1000.0;
    for i in 0..n_chunks {
        let pts = i as f64 * chunk_len;
        let wall_at_pts = play_epoch + pts + stall_shift;
        let t_send = if i < burst {
            i as f64 * 0.05
        } else if let Some(d) = stall_after.get(&i.saturating_sub(1)).copied() {
            // Gap ender: arrive exactly `d` after the nominal drain,
            // minus the insertion delay the stall measurement includes.
            let t = wall_at_pts + d - INSERTION_DELAY_S;
            stall_shift += d;
            rebuffers.push(ExpectedRebuffer { pts, duration_s: d });
            t
        } else {
            (wall_at_pts - params.buffer_lead_s).max(last_send + 0.01)
        };
        let t_send = t_send.max(last_send);
        last_send = t_send;
        let r = rungs[i];
        let slot = i as u64;
        let size = chunk_size(params, r, slot);
        chunks.push(ScheduledChunk {
            chunk_id: i as u64,
            t_send,
            byte_range: byte_range_for(r, slot, size),
            resolution: params.ladder[r].label.clone(),
            pts,
            length_s: chunk_len,
        });
        acks.push(ScheduledAck {
            chunk_id: i as u64,
            t_ack: t_send + nominal_rtt,
        });
    }

    // Reference buffer-health samples on the nominal timeline.
    let mut health = Vec::new();
    let total_wall = play_epoch + n_chunks as f64 * chunk_len + stall_shift;
    let mut t = 10.0;
    while t < total_wall {
        let arrived: f64 = chunks
            .iter()
            .filter(|c| c.t_send <= t)
            .map(|c| c.length_s)
            .sum();
        let played = (t - play_epoch).clamp(0.0, n_chunks as f64 * chunk_len);
        health.push(HealthSample {
            t,
            buffer_s: (arrived - played).max(0.0),
        });
        t += 10.0;
    }

    let up_base = rng.gen_range(params.latency_min_ms..=params.latency_max_ms);
    let down_base = rng.gen_range(params.latency_min_ms..=params.latency_max_ms);
    let latency = LatencyProfile {
        up_base_ms: up_base,
        up_jitter_ms: rng.gen_range(0.0..=params.jitter_max_ms),
        down_base_ms: down_base,
        down_jitter_ms: rng.gen_range(0.0..=params.jitter_max_ms),
    };

    let start_offset_s = if params.start_spread_s > 0.0 {
        rng.gen_range(0.0..params.start_spread_s)
    } else {
        0.0
    };

    TraceSession {
        session_id: format!("s{index:05}"),
        group: format!("g{:02}", index % params.groups),
        start_offset_s,
        latency,
        chunks,
        acks,
        rebuffers,
        health,
    }
}
