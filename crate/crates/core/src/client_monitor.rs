//! Client-side monitor: tracks the (emulated) player buffer, detects events
//! of interest, and keeps the per-window ledger.
//!
//! The player model is deliberately simple: chunks play strictly in
//! sequence at real-time rate, playback begins one insertion delay after
//! the startup fill is buffered, and an underrun stalls the playhead until
//! the missing chunk arrives. The playhead is advanced analytically, so
//! stall onsets and durations are exact no matter how coarsely the driver
//! ticks.
//!
//! Startup fill is not rebuffering: no stall can be reported before the
//! first frame has played. Mid-stream stalls are reported twice, once
//! provisionally at onset (no duration yet) and once on recovery with the
//! measured duration, which is `(t_recv + insertion_delay) - stall_start`.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::contract::{Contract, ContractOutcome, SessionLedger};
use crate::virtual_buffer::PTS_EPS;
use crate::wire::ClientEvent;

#[derive(Debug, Error)]
pub enum MonitorError {
    /// A chunk that does not continue the pts sequence. Not a failure: the
    /// session-reset path applies.
    #[error("out-of-order chunk: expected pts {expected}, got {got}")]
    OutOfOrderChunk { expected: f64, got: f64 },
    #[error("chunk received after stream end")]
    StreamEnded,
}

/// Chunk metadata as the client sees it on the stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamChunk {
    pub chunk_id: u64,
    pub resolution: String,
    pub pts: f64,
    pub length_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
enum PlayState {
    /// Nothing has played yet; filling the buffer is not a stall.
    Startup,
    /// Playing: `playhead(t) = anchor_pts + (t - anchor_t)`.
    Playing {
        anchor_t: f64,
        anchor_pts: f64,
    },
    /// Underrun: the playhead is parked at `pts` since `since_t`.
    Stalled {
        since_t: f64,
        pts: f64,
    },
    Ended,
}

/// Ledger snapshot taken every time a window closes.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowOutcome {
    pub window_index: u64,
    pub start_pts: f64,
    pub end_pts: f64,
    pub final_level: Option<usize>,
    pub exhausted: bool,
    pub played_s: Vec<(String, f64)>,
    pub rebuffer_count: u32,
    pub is_final: bool,
}

/// The client monitor for one session.
#[derive(Debug)]
pub struct ClientMonitor {
    contract: Contract,
    ledger: SessionLedger,
    insertion_delay_s: f64,
    /// Seconds of content the player buffers before the first frame plays.
    startup_fill_s: f64,
    state: PlayState,
    /// Every chunk received, in order; the resolution timeline.
    received: Vec<StreamChunk>,
    /// End pts of buffered content.
    content_end_pts: f64,
    playhead_pts: f64,
    /// Ledger accumulation horizon; always <= playhead.
    played_upto_pts: f64,
    /// Index into `received` of the chunk containing `played_upto_pts`.
    play_cursor: usize,
    /// (window, level) pairs already reported as violated.
    reported_violations: BTreeSet<(u64, usize)>,
    stream_complete: bool,
    events_out: Vec<ClientEvent>,
    outcomes: Vec<WindowOutcome>,
    session_anchor_pts: Option<f64>,
}

impl ClientMonitor {
    pub fn new(contract: Contract, insertion_delay_s: f64, startup_fill_s: f64) -> Self {
        Self {
            contract,
            ledger: SessionLedger::new(0.0),
            insertion_delay_s,
            startup_fill_s,
            state: PlayState::Startup,
            received: Vec::new(),
            content_end_pts: 0.0,
            playhead_pts: 0.0,
            played_upto_pts: 0.0,
            play_cursor: 0,
            reported_violations: BTreeSet::new(),
            stream_complete: false,
            events_out: Vec::new(),
            outcomes: Vec::new(),
            session_anchor_pts: None,
        }
    }

    pub fn contract(&self) -> &Contract {
        &self.contract
    }

    pub fn ledger(&self) -> &SessionLedger {
        &self.ledger
    }

    pub fn playhead_pts(&self) -> f64 {
        self.playhead_pts
    }

    pub fn is_stalled(&self) -> bool {
        matches!(self.state, PlayState::Stalled { .. })
    }

    pub fn has_ended(&self) -> bool {
        matches!(self.state, PlayState::Ended)
    }

    pub fn buffered_s(&self) -> f64 {
        (self.content_end_pts - self.playhead_pts).max(0.0)
    }

    pub fn outcomes(&self) -> &[WindowOutcome] {
        &self.outcomes
    }

    pub fn received(&self) -> &[StreamChunk] {
        &self.received
    }

    /// Drains the events detected so far, in detection order.
    pub fn take_events(&mut self) -> Vec<ClientEvent> {
        std::mem::take(&mut self.events_out)
    }

    /// Tells the monitor no further chunks will arrive; once the playhead
    /// drains the buffer the session ends instead of stalling.
    pub fn mark_stream_complete(&mut self, now: f64) {
        self.stream_complete = true;
        // A short stream may end while still filling: play what there is.
        if matches!(self.state, PlayState::Startup) && !self.received.is_empty() {
            self.state = PlayState::Playing {
                anchor_t: now + self.insertion_delay_s,
                anchor_pts: self.playhead_pts,
            };
        }
        self.advance_to(now);
        if let PlayState::Stalled { pts, .. } = self.state {
            // Nothing can end this stall; close out at the parked position.
            self.playhead_pts = pts;
            self.finish_session();
        }
    }

    /// Ingests one received chunk at client time `t_recv`.
    pub fn on_chunk_received(
        &mut self,
        chunk: StreamChunk,
        t_recv: f64,
    ) -> Result<(), MonitorError> {
        if matches!(self.state, PlayState::Ended) {
            return Err(MonitorError::StreamEnded);
        }
        // Bring the playhead up to date first so that an underrun between
        // the previous wake-up and now is detected with its exact onset.
        self.advance_to(t_recv);

        if let Some(last) = self.received.last() {
            let expected = last.pts + last.length_s;
            if (chunk.pts - expected).abs() > PTS_EPS {
                return Err(MonitorError::OutOfOrderChunk {
                    expected,
                    got: chunk.pts,
                });
            }
            if chunk.resolution != last.resolution {
                self.events_out.push(ClientEvent::ResolutionChange {
                    pts: chunk.pts,
                    resolution: chunk.resolution.clone(),
                });
            }
        } else {
            self.session_anchor_pts = Some(chunk.pts);
            self.ledger.window_start_pts = chunk.pts;
            self.playhead_pts = chunk.pts;
            self.played_upto_pts = chunk.pts;
        }

        self.content_end_pts = chunk.pts + chunk.length_s;
        self.received.push(chunk);

        match self.state {
            PlayState::Startup => {
                // The first frame plays once the startup fill is buffered
                // (or immediately when no fill is configured).
                if self.content_end_pts - self.playhead_pts + PTS_EPS >= self.startup_fill_s {
                    self.state = PlayState::Playing {
                        anchor_t: t_recv + self.insertion_delay_s,
                        anchor_pts: self.playhead_pts,
                    };
                }
            }
            PlayState::Stalled { since_t, pts } => {
                let duration = (t_recv + self.insertion_delay_s) - since_t;
                self.events_out.push(ClientEvent::Rebuffering {
                    pts,
                    duration_s: Some(duration),
                });
                self.state = PlayState::Playing {
                    anchor_t: t_recv + self.insertion_delay_s,
                    anchor_pts: pts,
                };
            }
            PlayState::Playing { .. } => {}
            PlayState::Ended => unreachable!("checked above"),
        }
        Ok(())
    }

    /// Advances the playhead to client time `now`, emitting any events the
    /// elapsed interval implies. Idempotent for non-increasing `now`.
    pub fn advance_to(&mut self, now: f64) {
        loop {
            let (anchor_t, anchor_pts) = match self.state {
                PlayState::Playing {
                    anchor_t,
                    anchor_pts,
                } => (anchor_t, anchor_pts),
                _ => return,
            };
            if now <= anchor_t {
                return;
            }
            let target_pts = anchor_pts + (now - anchor_t);
            let window_end = self.ledger.window_start_pts + self.contract.window_s();
            let chunk_end = self.current_chunk_end();
            let mut milestone = self.content_end_pts.min(window_end);
            if let Some(ce) = chunk_end {
                milestone = milestone.min(ce);
            }

            if target_pts + PTS_EPS < milestone {
                self.play_segment_to(target_pts);
                self.playhead_pts = target_pts;
                return;
            }

            // The playhead reaches `milestone` at this instant.
            let milestone_t = anchor_t + (milestone - anchor_pts);
            self.play_segment_to(milestone);
            self.playhead_pts = milestone;

            let at_chunk_end = chunk_end.is_some_and(|ce| (ce - milestone).abs() <= PTS_EPS);
            let at_window_end = (window_end - milestone).abs() <= PTS_EPS;
            let at_content_end = (self.content_end_pts - milestone).abs() <= PTS_EPS;

            if at_chunk_end {
                self.play_cursor += 1;
                self.check_and_report_violations();
            }
            if at_window_end {
                self.close_window(milestone, false);
            }
            if at_content_end {
                if self.stream_complete {
                    self.finish_session();
                    return;
                }
                self.state = PlayState::Stalled {
                    since_t: milestone_t,
                    pts: milestone,
                };
                self.ledger.record_rebuffering();
                self.events_out.push(ClientEvent::Rebuffering {
                    pts: milestone,
                    duration_s: None,
                });
                self.check_and_report_violations();
                return;
            }
            // Re-anchor at the milestone and keep consuming the interval.
            self.state = PlayState::Playing {
                anchor_t: milestone_t,
                anchor_pts: milestone,
            };
        }
    }

    /// End pts of the chunk containing the accumulation horizon.
    fn current_chunk_end(&self) -> Option<f64> {
        self.received
            .get(self.play_cursor)
            .map(|c| c.pts + c.length_s)
    }

    /// Accumulates played seconds from `played_upto_pts` to `to_pts`, which
    /// by milestone construction stays within one chunk and one window.
    fn play_segment_to(&mut self, to_pts: f64) {
        let len = to_pts - self.played_upto_pts;
        if len <= PTS_EPS {
            return;
        }
        let resolution = self.received[self.play_cursor].resolution.clone();
        self.ledger
            .record_playback(&self.contract, &resolution, len)
            .expect("milestone segments never overflow the window");
        self.played_upto_pts = to_pts;
    }

    /// Eager violation detection: reported at most once per (window, level),
    /// each report immediately followed by the local downgrade.
    fn check_and_report_violations(&mut self) {
        while let ContractOutcome::ViolatedAtLevel { level, .. } =
            self.ledger.check_level(&self.contract)
        {
            let key = (self.ledger.window_index, level);
            if self.reported_violations.insert(key) {
                self.events_out.push(ClientEvent::ContractViolation {
                    window_index: self.ledger.window_index,
                    level,
                    through_pts: self.playhead_pts,
                    changes: self
                        .changes_in_window(self.ledger.window_start_pts, self.playhead_pts),
                });
            }
            self.ledger.downgrade(&self.contract);
        }
    }

    /// Resolution changes with pts in `[window_start, through)`, judged
    /// against each chunk's predecessor (which may precede the window).
    /// The horizon is exclusive, mirroring the server monitor's view, so
    /// that a change on a chunk neither side has settled yet can never
    /// split the two lists.
    pub fn changes_in_window(&self, window_start: f64, through_pts: f64) -> Vec<(f64, String)> {
        let mut out = Vec::new();
        for pair in self.received.windows(2) {
            let (prev, cur) = (&pair[0], &pair[1]);
            if cur.resolution != prev.resolution
                && cur.pts >= window_start - PTS_EPS
                && cur.pts < through_pts - PTS_EPS
            {
                out.push((cur.pts, cur.resolution.clone()));
            }
        }
        out
    }

    fn close_window(&mut self, end_pts: f64, is_final: bool) {
        let outcome = WindowOutcome {
            window_index: self.ledger.window_index,
            start_pts: self.ledger.window_start_pts,
            end_pts,
            final_level: self.ledger.final_level(),
            exhausted: self.ledger.exhausted,
            played_s: self
                .ledger
                .played_s
                .iter()
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
            rebuffer_count: self.ledger.rebuffer_count,
            is_final,
        };
        self.events_out.push(ClientEvent::WindowEnd {
            window_index: outcome.window_index,
            start_pts: outcome.start_pts,
            end_pts: outcome.end_pts,
            final_level: outcome.final_level,
            exhausted: outcome.exhausted,
            played_s: outcome.played_s.clone(),
            rebuffer_count: outcome.rebuffer_count,
            is_final,
        });
        self.outcomes.push(outcome);
        if !is_final {
            self.ledger.roll_window(end_pts);
        }
    }

    fn finish_session(&mut self) {
        self.close_window(self.playhead_pts, true);
        self.state = PlayState::Ended;
    }

    /// Auditor-commanded reset (rewind/forward): fresh window and buffer
    /// anchored at `new_start_pts`.
    pub fn reset_to(&mut self, new_start_pts: f64) {
        self.received.clear();
        self.play_cursor = 0;
        self.content_end_pts = new_start_pts;
        self.playhead_pts = new_start_pts;
        self.played_upto_pts = new_start_pts;
        self.state = PlayState::Startup;
        self.ledger.roll_window(new_start_pts);
    }
}
