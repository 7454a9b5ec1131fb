//! Replay reports: the per-session record of what happened, written as
//! line-delimited JSON and convertible into analytics summaries.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use ugovor_core::analytics::{SessionSummary, WindowRecord};
use ugovor_core::auditor::AuditRecord;
use ugovor_core::wire::{ClientEvent, TerminateReason};

use crate::endpoints::client::ClientEventReport;
use crate::trace::TraceSession;
use crate::transport::CounterSnapshot;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionReport {
    pub session_id: String,
    pub group: String,
    pub engaged: bool,
    /// Session ended with the auditor's graceful close.
    pub closed: bool,
    pub terminated: Option<TerminateReason>,
    /// Session time of termination and the window it fell into, if any.
    pub terminated_at: Option<(f64, u64)>,
    pub events: Vec<ClientEventReport>,
    /// Client-side window outcomes.
    pub windows: Vec<WindowRecord>,
    /// The auditor's verified window records.
    pub auditor_windows: Vec<WindowRecord>,
    /// The server monitor's window accounting.
    pub server_windows: Vec<WindowRecord>,
    /// Confirmed rebufferings: (client duration, server bound).
    pub bound_pairs: Vec<(f64, f64)>,
    /// Stalls the trace scripted.
    pub expected_rebuffers: Vec<(f64, f64)>,
    /// Stalls the client measured (final reports with durations).
    pub detected_rebuffers: Vec<(f64, f64)>,
    pub confirmed_rebuffer_pts: Vec<f64>,
    pub misbehavior_reports: usize,
    pub max_messages_per_event: u32,
    /// Client, auditor, and server window accounting all agree.
    pub ledgers_agree: bool,
    pub received_chunks: u64,
}

impl SessionReport {
    /// Strips wall-clock-derived quantities so that two replays of the
    /// same inputs produce identical files.
    pub fn redact_timing(&mut self) {
        self.terminated_at = self.terminated_at.map(|(_, w)| (0.0, w));
        self.bound_pairs.clear();
        self.detected_rebuffers = self
            .detected_rebuffers
            .iter()
            .map(|&(pts, _)| (pts, 0.0))
            .collect();
        for e in &mut self.events {
            if let ClientEvent::Rebuffering { duration_s, .. } = &mut e.event {
                *duration_s = duration_s.map(|_| 0.0);
            }
        }
    }

    pub fn summary(&self, trace: Option<&TraceSession>) -> SessionSummary {
        let switches = self
            .events
            .iter()
            .filter(|e| !e.fabricated && matches!(e.event, ClientEvent::ResolutionChange { .. }))
            .count() as u32;
        let (duration_s, timeline, start_offset_s, group) = match trace {
            Some(t) => {
                let summary = crate::trace::trace_summary(t);
                (
                    summary.duration_s,
                    summary.timeline,
                    summary.start_offset_s,
                    summary.group,
                )
            }
            None => (
                self.windows
                    .iter()
                    .map(|w| w.end_pts - w.start_pts)
                    .sum::<f64>()
                    .max(1.0),
                Vec::new(),
                0.0,
                self.group.clone(),
            ),
        };
        SessionSummary {
            session_id: self.session_id.clone(),
            group,
            start_offset_s,
            duration_s,
            resolution_switches: switches,
            rebuffer_durations_s: self.detected_rebuffers.iter().map(|&(_, d)| d).collect(),
            timeline,
            windows: self.windows.clone(),
            bound_pairs: self.bound_pairs.clone(),
            terminated: self.terminated.is_some(),
        }
    }
}

/// Corpus-level rollup appended to the report file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayTotals {
    pub sessions: usize,
    pub terminated: usize,
    pub closed: usize,
    pub counters: CounterSnapshot,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "rec", rename_all = "snake_case")]
enum ReportLine {
    Session(Box<SessionReport>),
    Totals(ReplayTotals),
}

pub fn save_reports(
    path: &Path,
    sessions: &[SessionReport],
    totals: &ReplayTotals,
) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in sessions {
        let line = ReportLine::Session(Box::new(s.clone()));
        writeln!(w, "{}", serde_json::to_string(&line)?)?;
    }
    writeln!(
        w,
        "{}",
        serde_json::to_string(&ReportLine::Totals(totals.clone()))?
    )?;
    w.flush()
}

pub fn load_reports(path: &Path) -> std::io::Result<(Vec<SessionReport>, Option<ReplayTotals>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut sessions = Vec::new();
    let mut totals = None;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ReportLine>(&line) {
            Ok(ReportLine::Session(s)) => sessions.push(*s),
            Ok(ReportLine::Totals(t)) => totals = Some(t),
            Err(e) => {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    e.to_string(),
                ))
            }
        }
    }
    Ok((sessions, totals))
}

/// Pulls the auditor-side facts out of a session's verified log.
pub struct AuditFacts {
    pub windows: Vec<WindowRecord>,
    pub bound_pairs: Vec<(f64, f64)>,
    pub confirmed_rebuffer_pts: Vec<f64>,
    pub misbehavior_reports: usize,
    pub max_messages_per_event: u32,
    pub terminated: Option<TerminateReason>,
    pub terminated_at: Option<f64>,
    /// Index of the window that was active when the session terminated:
    /// the number of windows the auditor had closed by then.
    pub terminated_window: Option<u64>,
}

pub fn audit_facts(log: &[AuditRecord]) -> AuditFacts {
    let mut facts = AuditFacts {
        windows: Vec::new(),
        bound_pairs: Vec::new(),
        confirmed_rebuffer_pts: Vec::new(),
        misbehavior_reports: 0,
        max_messages_per_event: 0,
        terminated: None,
        terminated_at: None,
        terminated_window: None,
    };
    let mut provisional: BTreeMap<i64, f64> = BTreeMap::new();
    for rec in log {
        match rec {
            AuditRecord::EventConfirmed {
                event,
                upper_bound_s,
                messages,
                ..
            } => {
                facts.max_messages_per_event = facts.max_messages_per_event.max(*messages);
                if let ClientEvent::Rebuffering { pts, duration_s } = event {
                    let key = (pts * 1e6).round() as i64;
                    if !provisional.contains_key(&key) {
                        provisional.insert(key, 0.0);
                        facts.confirmed_rebuffer_pts.push(*pts);
                    }
                    if let (Some(d), Some(b)) = (duration_s, upper_bound_s) {
                        facts.bound_pairs.push((*d, *b));
                    }
                }
            }
            AuditRecord::WindowClosed {
                window_index,
                start_pts,
                end_pts,
                final_level,
                exhausted,
                played_s,
                rebuffer_count,
                ..
            } => facts.windows.push(WindowRecord {
                window_index: *window_index,
                start_pts: *start_pts,
                end_pts: *end_pts,
                final_level: *final_level,
                exhausted: *exhausted,
                rebuffer_count: *rebuffer_count,
                played_s: played_s.clone(),
            }),
            AuditRecord::Misbehavior { .. } => facts.misbehavior_reports += 1,
            AuditRecord::Terminated { t, reason } => {
                facts.terminated = Some(reason.clone());
                facts.terminated_at = Some(*t);
                facts.terminated_window = Some(facts.windows.len() as u64);
            }
            _ => {}
        }
    }
    facts
}

/// Window-accounting agreement across the three parties, with a small
/// tolerance on the per-resolution seconds.
pub fn windows_agree(a: &[WindowRecord], b: &[WindowRecord]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    a.iter().zip(b.iter()).all(|(x, y)| {
        x.window_index == y.window_index
            && (x.start_pts - y.start_pts).abs() < 1e-6
            && (x.end_pts - y.end_pts).abs() < 1e-6
            && x.rebuffer_count == y.rebuffer_count
            && played_maps_agree(&x.played_s, &y.played_s)
    })
}

fn played_maps_agree(a: &[(String, f64)], b: &[(String, f64)]) -> bool {
    let a: BTreeMap<&str, f64> = a.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    let b: BTreeMap<&str, f64> = b.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    a.len() == b.len()
        && a.iter()
            .all(|(k, v)| b.get(k).is_some_and(|bv| (bv - v).abs() < 1e-6))
}
