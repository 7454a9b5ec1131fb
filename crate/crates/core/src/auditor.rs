//! The auditor: reconciles client claims with server verdicts, drives
//! window and level transitions, terminates on disagreement, and keeps the
//! verified per-session audit log.
//!
//! The auditor never judges quality itself; it only checks that the two
//! monitors tell the same story. One reconciliation is in flight per
//! session at a time; later client events queue in arrival order, which
//! keeps the query/verdict/sync sequence deterministic. A silent server
//! monitor is indistinguishable from an uncooperative one, so a reply
//! timeout counts as disagreement, logged under its own reason.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contract::{Contract, SessionLedger};
use crate::wire::{
    ClientEvent, MisbehaviorReport, MonitorQuery, Role, SyncAction, TerminateReason, Verdict,
};

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("session is not active")]
    SessionNotActive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionState {
    Active,
    Terminating,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditorConfig {
    /// Budget for the server monitor's reply, in session seconds.
    pub reply_timeout_s: f64,
    /// Window for the second party to corroborate a reset.
    pub reset_grace_s: f64,
}

impl Default for AuditorConfig {
    fn default() -> Self {
        Self {
            reply_timeout_s: 5.0,
            reset_grace_s: 1.0,
        }
    }
}

/// What the auditor asks the transport layer to send.
#[derive(Debug, Clone, PartialEq)]
pub enum AuditorOutput {
    QueryServer(MonitorQuery),
    /// Sync goes to both monitors (steps 4 and 5 of the exchange).
    SyncBoth(SyncAction),
    TerminateBoth(TerminateReason),
}

/// One entry of the verified audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rec", rename_all = "snake_case")]
pub enum AuditRecord {
    SessionStart {
        t: f64,
        session_id: String,
    },
    EventConfirmed {
        t: f64,
        event: ClientEvent,
        upper_bound_s: Option<f64>,
        /// Control messages this reconciliation cost end to end:
        /// notify + query + verdicts + the two syncs.
        messages: u32,
    },
    EventDisputed {
        t: f64,
        event: ClientEvent,
        reason: String,
    },
    Downgraded {
        t: f64,
        window_index: u64,
        to_level: Option<usize>,
    },
    WindowClosed {
        t: f64,
        window_index: u64,
        start_pts: f64,
        end_pts: f64,
        final_level: Option<usize>,
        exhausted: bool,
        played_s: Vec<(String, f64)>,
        rebuffer_count: u32,
    },
    ResetApplied {
        t: f64,
        new_start_pts: f64,
    },
    Misbehavior {
        t: f64,
        report: MisbehaviorReport,
    },
    Terminated {
        t: f64,
        reason: TerminateReason,
    },
    Closed {
        t: f64,
    },
}

#[derive(Debug)]
struct Pending {
    event_seq: u64,
    event: ClientEvent,
    query: MonitorQuery,
    deadline: f64,
    extended: bool,
    verdicts: u32,
}

fn pts_key(pts: f64) -> i64 {
    (pts * 1e6).round() as i64
}

/// Auditor-side state for one session.
#[derive(Debug)]
pub struct AuditSession {
    session_id: String,
    contract: Contract,
    cfg: AuditorConfig,
    state: SessionState,
    /// The auditor's mirror of the window accounting, fed only by
    /// confirmed events.
    ledger: SessionLedger,
    pending: Option<Pending>,
    queue: VecDeque<(u64, ClientEvent)>,
    pending_reset: Option<(Role, f64, f64)>,
    confirmed_rebuffer_pts: BTreeSet<i64>,
    log: Vec<AuditRecord>,
}

impl AuditSession {
    pub fn new(
        session_id: impl Into<String>,
        contract: Contract,
        cfg: AuditorConfig,
        now: f64,
    ) -> Self {
        let session_id = session_id.into();
        let log = vec![AuditRecord::SessionStart {
            t: now,
            session_id: session_id.clone(),
        }];
        Self {
            session_id,
            contract,
            cfg,
            state: SessionState::Active,
            ledger: SessionLedger::new(0.0),
            pending: None,
            queue: VecDeque::new(),
            pending_reset: None,
            confirmed_rebuffer_pts: BTreeSet::new(),
            log,
        }
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn ledger(&self) -> &SessionLedger {
        &self.ledger
    }

    pub fn log(&self) -> &[AuditRecord] {
        &self.log
    }

    /// Emits the append-only verified log as line-delimited records.
    pub fn export_log_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.log {
            out.push_str(&serde_json::to_string(rec).expect("audit records serialize"));
            out.push('\n');
        }
        out
    }

    /// A notification from the client monitor: queue it and, if nothing is
    /// in flight, open a reconciliation by querying the server monitor.
    pub fn on_client_event(
        &mut self,
        seq: u64,
        event: ClientEvent,
        now: f64,
    ) -> Result<Vec<AuditorOutput>, AuditError> {
        if self.state != SessionState::Active {
            return Err(AuditError::SessionNotActive);
        }
        self.queue.push_back((seq, event));
        Ok(self.open_next(now))
    }

    fn open_next(&mut self, now: f64) -> Vec<AuditorOutput> {
        if self.pending.is_some() || self.state != SessionState::Active {
            return Vec::new();
        }
        let (event_seq, event) = match self.queue.pop_front() {
            Some(e) => e,
            None => return Vec::new(),
        };
        let query = self.query_for(&event);
        self.pending = Some(Pending {
            event_seq,
            event,
            query: query.clone(),
            deadline: now + self.cfg.reply_timeout_s,
            extended: false,
            verdicts: 0,
        });
        vec![AuditorOutput::QueryServer(query)]
    }

    /// The auditor asks the server monitor to confirm an event of the same
    /// kind at the same presentation coordinates as the client's claim.
    fn query_for(&self, event: &ClientEvent) -> MonitorQuery {
        match event {
            ClientEvent::Rebuffering { pts, duration_s } => MonitorQuery::ConfirmRebuffering {
                pts: *pts,
                claimed_duration_s: *duration_s,
            },
            ClientEvent::ResolutionChange { pts, resolution } => {
                MonitorQuery::ConfirmResolutionChange {
                    pts: *pts,
                    resolution: resolution.clone(),
                }
            }
            ClientEvent::ContractViolation {
                window_index,
                through_pts,
                changes,
                ..
            } => MonitorQuery::ConfirmViolation {
                window_index: *window_index,
                window_start_pts: self.ledger.window_start_pts,
                through_pts: *through_pts,
                changes: changes.clone(),
            },
            ClientEvent::WindowEnd {
                window_index,
                start_pts,
                end_pts,
                played_s,
                rebuffer_count,
                ..
            } => MonitorQuery::ConfirmWindowEnd {
                window_index: *window_index,
                start_pts: *start_pts,
                end_pts: *end_pts,
                played_s: played_s.clone(),
                rebuffer_count: *rebuffer_count,
            },
        }
    }

    /// The server monitor's reply for the in-flight reconciliation. A
    /// verdict with no matching pending query is itself a protocol error
    /// and terminates the session.
    pub fn on_verdict(
        &mut self,
        query: &MonitorQuery,
        verdict: Verdict,
        now: f64,
    ) -> Vec<AuditorOutput> {
        if self.state != SessionState::Active {
            return Vec::new();
        }
        let matches_pending = self.pending.as_ref().is_some_and(|p| p.query == *query);
        if !matches_pending {
            return self.terminate(
                TerminateReason::ProtocolError {
                    detail: "verdict without a matching pending query".into(),
                },
                now,
            );
        }
        self.pending.as_mut().expect("matched above").verdicts += 1;
        match verdict {
            Verdict::Deferred => {
                let p = self.pending.as_mut().expect("matched above");
                if !p.extended {
                    p.extended = true;
                    p.deadline = now + self.cfg.reply_timeout_s;
                }
                Vec::new()
            }
            Verdict::Dispute { reason } => {
                let p = self.pending.take().expect("matched above");
                self.log.push(AuditRecord::EventDisputed {
                    t: now,
                    event: p.event.clone(),
                    reason: reason.clone(),
                });
                self.terminate(
                    TerminateReason::Dispute {
                        event_kind: p.event.kind_name().to_string(),
                        detail: reason,
                    },
                    now,
                )
            }
            Verdict::Confirm { upper_bound_s } => {
                let p = self.pending.take().expect("matched above");
                let mut outs = self.apply_confirmed(p, upper_bound_s, now);
                outs.extend(self.open_next(now));
                outs
            }
        }
    }

    fn apply_confirmed(
        &mut self,
        p: Pending,
        upper_bound_s: Option<f64>,
        now: f64,
    ) -> Vec<AuditorOutput> {
        self.log.push(AuditRecord::EventConfirmed {
            t: now,
            event: p.event.clone(),
            upper_bound_s,
            messages: 4 + p.verdicts,
        });
        match &p.event {
            ClientEvent::Rebuffering { pts, .. } => {
                // The provisional report and the duration follow-up refer to
                // the same stall; count it once.
                if self.confirmed_rebuffer_pts.insert(pts_key(*pts)) {
                    self.ledger.record_rebuffering();
                }
                vec![AuditorOutput::SyncBoth(SyncAction::Proceed {
                    event_seq: p.event_seq,
                })]
            }
            ClientEvent::ResolutionChange { .. } => {
                vec![AuditorOutput::SyncBoth(SyncAction::Proceed {
                    event_seq: p.event_seq,
                })]
            }
            ClientEvent::ContractViolation { window_index, .. } => {
                self.ledger.downgrade(&self.contract);
                let to_level = self.ledger.final_level();
                self.log.push(AuditRecord::Downgraded {
                    t: now,
                    window_index: *window_index,
                    to_level,
                });
                vec![AuditorOutput::SyncBoth(SyncAction::Downgraded {
                    event_seq: p.event_seq,
                    window_index: *window_index,
                    to_level,
                })]
            }
            ClientEvent::WindowEnd {
                window_index,
                start_pts,
                end_pts,
                final_level,
                exhausted,
                played_s,
                rebuffer_count,
                is_final,
            } => {
                self.log.push(AuditRecord::WindowClosed {
                    t: now,
                    window_index: *window_index,
                    start_pts: *start_pts,
                    end_pts: *end_pts,
                    final_level: *final_level,
                    exhausted: *exhausted,
                    played_s: played_s.clone(),
                    rebuffer_count: *rebuffer_count,
                });
                // Adopt the verified accounting, then roll the mirror.
                self.ledger.played_s = played_s.iter().cloned().collect();
                self.ledger.rebuffer_count = *rebuffer_count;
                self.ledger.exhausted = *exhausted;
                if let Some(level) = final_level {
                    self.ledger.level_index = *level;
                }
                if *is_final {
                    self.state = SessionState::Closed;
                    self.log.push(AuditRecord::Closed { t: now });
                    vec![AuditorOutput::SyncBoth(SyncAction::Closed)]
                } else {
                    self.ledger.roll_window(*end_pts);
                    vec![AuditorOutput::SyncBoth(SyncAction::WindowRolled {
                        event_seq: p.event_seq,
                        window_index: *window_index + 1,
                        next_start_pts: *end_pts,
                    })]
                }
            }
        }
    }

    /// Drives the reply timer and the reset grace period.
    pub fn tick(&mut self, now: f64) -> Vec<AuditorOutput> {
        if self.state != SessionState::Active {
            return Vec::new();
        }
        if let Some(p) = &self.pending {
            if now >= p.deadline {
                let kind = p.event.kind_name().to_string();
                return self.terminate(TerminateReason::Timeout { event_kind: kind }, now);
            }
        }
        if let Some((origin, _, deadline)) = self.pending_reset {
            if now >= deadline {
                return self.terminate(TerminateReason::OneSidedReset { origin }, now);
            }
        }
        Vec::new()
    }

    /// A reset notification from one monitor. The session survives only if
    /// the other side corroborates within the grace period.
    pub fn on_reset(&mut self, origin: Role, new_start_pts: f64, now: f64) -> Vec<AuditorOutput> {
        if self.state != SessionState::Active {
            return Vec::new();
        }
        match self.pending_reset {
            Some((first_origin, pts, _)) if first_origin != origin => {
                self.pending_reset = None;
                self.pending = None;
                self.queue.clear();
                let anchor = pts.max(new_start_pts);
                self.ledger.roll_window(anchor);
                self.log.push(AuditRecord::ResetApplied {
                    t: now,
                    new_start_pts: anchor,
                });
                vec![AuditorOutput::SyncBoth(SyncAction::ResetApplied {
                    new_start_pts: anchor,
                })]
            }
            _ => {
                self.pending_reset = Some((origin, new_start_pts, now + self.cfg.reset_grace_s));
                Vec::new()
            }
        }
    }

    /// Misbehavior evidence from the server monitor. The report is advisory;
    /// terminating on it is this auditor's policy.
    pub fn on_misbehavior(&mut self, report: MisbehaviorReport, now: f64) -> Vec<AuditorOutput> {
        if self.state != SessionState::Active {
            return Vec::new();
        }
        self.log.push(AuditRecord::Misbehavior {
            t: now,
            report: report.clone(),
        });
        self.terminate(
            TerminateReason::Misbehavior {
                detail: format!(
                    "{}: consumed bitrate {:.0} b/s is {:.2}x the ack-implied throughput {:.0} b/s",
                    report.detail,
                    report.consumed_bitrate_bps,
                    report.ratio,
                    report.ack_throughput_bps
                ),
            },
            now,
        )
    }

    /// A protocol-level fault observed by the transport (bad sequence
    /// numbers, undecodable frame, contract mismatch at hello).
    pub fn on_protocol_error(&mut self, detail: String, now: f64) -> Vec<AuditorOutput> {
        if self.state != SessionState::Active {
            return Vec::new();
        }
        self.terminate(TerminateReason::ProtocolError { detail }, now)
    }

    fn terminate(&mut self, reason: TerminateReason, now: f64) -> Vec<AuditorOutput> {
        self.state = SessionState::Terminating;
        self.pending = None;
        self.queue.clear();
        self.pending_reset = None;
        self.log.push(AuditRecord::Terminated {
            t: now,
            reason: reason.clone(),
        });
        vec![AuditorOutput::TerminateBoth(reason)]
    }
}
