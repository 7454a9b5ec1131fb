//! Streaming contracts and per-window session ledgers.
//!
//! A contract is a JSON object with three keys: `"window"` (seconds),
//! `"resolution"` (an ordered list of levels, each a list of
//! `[label, max_fraction]` pairs) and `"rebuffering"` (one cap per level).
//! Level 0 is the strictest; when a level is violated, monitoring moves to
//! the next level for the remainder of the window. A window that violates
//! the last level is exhausted, which is a pricing outcome, never by itself
//! a reason to end the session.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack for floating-point comparisons on accumulated seconds.
const SECONDS_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ContractError {
    /// The document is not well-formed JSON of the expected shape.
    #[error("malformed contract document: {0}")]
    MalformedDocument(String),
    /// The document parsed but violates a contract invariant.
    #[error("invalid contract: {invariant}")]
    InvalidContract { invariant: String },
    /// Accumulated playback would exceed the window length.
    #[error("window overflow: {would_be:.3} s played in a {window_s:.3} s window")]
    WindowOverflow { would_be: f64, window_s: f64 },
}

/// One leniency rung of a contract: per-resolution caps on the fraction of
/// the window that may play at that resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Level {
    caps: Vec<(String, f64)>,
}

impl Level {
    pub fn new(caps: Vec<(String, f64)>) -> Self {
        Self { caps }
    }

    /// Cap for a resolution label, or `None` when the level does not
    /// mention the label (which forbids it entirely).
    pub fn cap_for(&self, label: &str) -> Option<f64> {
        self.caps
            .iter()
            .find(|(l, _)| l == label)
            .map(|&(_, cap)| cap)
    }

    pub fn caps(&self) -> &[(String, f64)] {
        &self.caps
    }
}

/// Raw document shape of a contract, used only for (de)serialization.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContractDoc {
    window: f64,
    resolution: Vec<Level>,
    rebuffering: Vec<u32>,
}

/// A validated streaming contract.
#[derive(Debug, Clone, PartialEq)]
pub struct Contract {
    window_s: f64,
    levels: Vec<Level>,
    rebuffering_caps: Vec<u32>,
}

impl Contract {
    /// Builds a contract from parts, enforcing every invariant.
    pub fn new(
        window_s: f64,
        levels: Vec<Level>,
        rebuffering_caps: Vec<u32>,
    ) -> Result<Self, ContractError> {
        let invalid = |invariant: &str| ContractError::InvalidContract {
            invariant: invariant.to_string(),
        };
        if !(window_s > 0.0) || !window_s.is_finite() {
            return Err(invalid("window must be a positive number of seconds"));
        }
        if levels.is_empty() {
            return Err(invalid("resolution must list at least one level"));
        }
        if rebuffering_caps.len() != levels.len() {
            return Err(invalid(
                "rebuffering must list exactly one cap per resolution level",
            ));
        }
        if rebuffering_caps.windows(2).any(|w| w[0] > w[1]) {
            return Err(invalid(
                "rebuffering caps must be non-decreasing across levels",
            ));
        }
        for (idx, level) in levels.iter().enumerate() {
            for (label, cap) in &level.caps {
                if !(0.0..=1.0).contains(cap) {
                    return Err(invalid(&format!(
                        "level {idx}: cap for {label:?} must lie in [0, 1]"
                    )));
                }
            }
            for (i, (label, _)) in level.caps.iter().enumerate() {
                if level.caps[i + 1..].iter().any(|(other, _)| other == label) {
                    return Err(invalid(&format!(
                        "level {idx}: duplicate resolution label {label:?}"
                    )));
                }
            }
            if !level.caps.iter().any(|&(_, cap)| cap >= 1.0) {
                return Err(invalid(&format!(
                    "level {idx}: at least one resolution needs a cap of 1"
                )));
            }
        }
        Ok(Self {
            window_s,
            levels,
            rebuffering_caps,
        })
    }

    /// Parses and validates a contract document.
    pub fn parse(text: &str) -> Result<Self, ContractError> {
        let doc: ContractDoc = serde_json::from_str(text)
            .map_err(|e| ContractError::MalformedDocument(e.to_string()))?;
        Self::new(doc.window, doc.resolution, doc.rebuffering)
    }

    /// Canonical compact rendering of the contract document; two contracts
    /// are the same agreement iff their canonical texts are equal.
    pub fn canonical_text(&self) -> String {
        let doc = ContractDoc {
            window: self.window_s,
            resolution: self.levels.clone(),
            rebuffering: self.rebuffering_caps.clone(),
        };
        serde_json::to_string(&doc).expect("contract document serializes")
    }

    pub fn window_s(&self) -> f64 {
        self.window_s
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn rebuffering_cap(&self, level: usize) -> u32 {
        self.rebuffering_caps[level]
    }

    pub fn rebuffering_caps(&self) -> &[u32] {
        &self.rebuffering_caps
    }
}

/// Why a level was found violated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Breach {
    /// A resolution's played share of the window exceeds its cap.
    ResolutionCap {
        resolution: String,
        played_s: f64,
        cap: f64,
    },
    /// The ledger saw a resolution the level does not mention at all.
    UnknownResolution { resolution: String },
    /// More rebuffering events than the level allows.
    RebufferingCap { count: u32, cap: u32 },
}

/// Outcome of checking a ledger against its current contract level.
#[derive(Debug, Clone, PartialEq)]
pub enum ContractOutcome {
    Satisfied,
    ViolatedAtLevel { level: usize, breach: Breach },
}

impl ContractOutcome {
    pub fn is_satisfied(&self) -> bool {
        matches!(self, ContractOutcome::Satisfied)
    }
}

/// Result of downgrading after a violation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Downgrade {
    /// Monitoring continues at this (more lenient) level.
    To(usize),
    /// No more lenient level exists; the window is exhausted.
    Exhausted,
}

/// Per-window accounting of played time per resolution and rebufferings,
/// judged at the ledger's current contract level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLedger {
    pub window_index: u64,
    pub level_index: usize,
    /// Set once the last level has been violated; terminal for the window.
    pub exhausted: bool,
    pub played_s: BTreeMap<String, f64>,
    pub rebuffer_count: u32,
    pub window_start_pts: f64,
}

impl SessionLedger {
    /// Fresh ledger for the first window of a session anchored at `start_pts`.
    pub fn new(start_pts: f64) -> Self {
        Self {
            window_index: 0,
            level_index: 0,
            exhausted: false,
            played_s: BTreeMap::new(),
            rebuffer_count: 0,
            window_start_pts: start_pts,
        }
    }

    pub fn total_played_s(&self) -> f64 {
        self.played_s.values().sum()
    }

    /// Accumulates `seconds` of playback at `resolution`.
    pub fn record_playback(
        &mut self,
        contract: &Contract,
        resolution: &str,
        seconds: f64,
    ) -> Result<(), ContractError> {
        debug_assert!(seconds >= 0.0);
        let would_be = self.total_played_s() + seconds;
        if would_be > contract.window_s() + SECONDS_EPS {
            return Err(ContractError::WindowOverflow {
                would_be,
                window_s: contract.window_s(),
            });
        }
        *self.played_s.entry(resolution.to_string()).or_insert(0.0) += seconds;
        Ok(())
    }

    pub fn record_rebuffering(&mut self) {
        self.rebuffer_count += 1;
    }

    /// Checks the ledger against its current level. Detection is eager: a
    /// violation is reported as soon as an accumulated quantity provably
    /// exceeds its cap, mid-window included. Exhausted ledgers are no
    /// longer constrained and always report `Satisfied`.
    pub fn check_level(&self, contract: &Contract) -> ContractOutcome {
        if self.exhausted {
            return ContractOutcome::Satisfied;
        }
        let level_index = self.level_index;
        let level = &contract.levels()[level_index];
        for (resolution, &played) in &self.played_s {
            match level.cap_for(resolution) {
                None => {
                    return ContractOutcome::ViolatedAtLevel {
                        level: level_index,
                        breach: Breach::UnknownResolution {
                            resolution: resolution.clone(),
                        },
                    };
                }
                Some(cap) => {
                    if played > cap * contract.window_s() + SECONDS_EPS {
                        return ContractOutcome::ViolatedAtLevel {
                            level: level_index,
                            breach: Breach::ResolutionCap {
                                resolution: resolution.clone(),
                                played_s: played,
                                cap,
                            },
                        };
                    }
                }
            }
        }
        let cap = contract.rebuffering_cap(level_index);
        if self.rebuffer_count > cap {
            return ContractOutcome::ViolatedAtLevel {
                level: level_index,
                breach: Breach::RebufferingCap {
                    count: self.rebuffer_count,
                    cap,
                },
            };
        }
        ContractOutcome::Satisfied
    }

    /// Moves monitoring to the next level after a violation. Accumulated
    /// statistics carry over: the remainder of the same window is judged at
    /// the new level.
    pub fn downgrade(&mut self, contract: &Contract) -> Downgrade {
        if self.level_index + 1 < contract.level_count() {
            self.level_index += 1;
            Downgrade::To(self.level_index)
        } else {
            self.exhausted = true;
            Downgrade::Exhausted
        }
    }

    /// Starts a fresh window at `new_start_pts`: statistics cleared, level
    /// back to 0. Used both at window expiry and on an auditor-commanded
    /// reset (rewind/forward).
    pub fn roll_window(&mut self, new_start_pts: f64) {
        self.window_index += 1;
        self.level_index = 0;
        self.exhausted = false;
        self.played_s.clear();
        self.rebuffer_count = 0;
        self.window_start_pts = new_start_pts;
    }

    /// Final level of the window as an outcome label: `Some(level)` if the
    /// window ended satisfied at `level`, `None` if exhausted.
    pub fn final_level(&self) -> Option<usize> {
        if self.exhausted {
            None
        } else {
            Some(self.level_index)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const EXAMPLE_CONTRACT: &str = r#"
        { "window"      : 120,
          "resolution"  : [[["720p", 0.5], ["1080p", 1], ["4K", 1]],
                           [["720p", 0.7], ["1080p", 1], ["4K", 1]],
                           [["720p", 0.9], ["1080p", 1], ["4K", 1]]],
          "rebuffering" : [1, 5, 10] }
    "#;

    fn example() -> Contract {
        Contract::parse(EXAMPLE_CONTRACT).unwrap()
    }

    #[test]
    fn parses_example_contract() {
        let c = example();
        assert_eq!(c.window_s(), 120.0);
        assert_eq!(c.level_count(), 3);
        assert_eq!(c.levels()[0].cap_for("720p"), Some(0.5));
        assert_eq!(c.levels()[1].cap_for("720p"), Some(0.7));
        assert_eq!(c.levels()[2].cap_for("720p"), Some(0.9));
        assert_eq!(c.levels()[0].cap_for("4K"), Some(1.0));
        assert_eq!(c.rebuffering_caps(), &[1, 5, 10]);
    }

    #[test]
    fn rejects_zero_window() {
        let err = Contract::parse(r#"{"window":0,"resolution":[[["720p",1]]],"rebuffering":[1]}"#)
            .unwrap_err();
        assert!(
            matches!(err, ContractError::InvalidContract { .. }),
            "{err}"
        );
    }

    #[test]
    fn rejects_rebuffering_length_mismatch() {
        let err = Contract::parse(
            r#"{"window":120,
                "resolution":[[["720p",1]],[["720p",1]],[["720p",1]]],
                "rebuffering":[1,5]}"#,
        )
        .unwrap_err();
        match err {
            ContractError::InvalidContract { invariant } => {
                assert!(invariant.contains("one cap per"), "{invariant}");
            }
            other => panic!("expected InvalidContract, got {other}"),
        }
    }

    #[test]
    fn rejects_cap_out_of_range() {
        let err = Contract::parse(
            r#"{"window":120,"resolution":[[["720p",1.2],["1080p",1]]],"rebuffering":[1]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, ContractError::InvalidContract { .. }));
    }

    #[test]
    fn rejects_decreasing_rebuffering_caps() {
        let err = Contract::parse(
            r#"{"window":120,"resolution":[[["720p",1]],[["720p",1]]],"rebuffering":[5,1]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, ContractError::InvalidContract { .. }));
    }

    #[test]
    fn rejects_level_without_cap_one() {
        let err = Contract::parse(
            r#"{"window":120,"resolution":[[["720p",0.5],["1080p",0.9]]],"rebuffering":[1]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, ContractError::InvalidContract { .. }));
    }

    #[test]
    fn rejects_duplicate_labels_in_level() {
        let err = Contract::parse(
            r#"{"window":120,"resolution":[[["720p",0.5],["720p",1]]],"rebuffering":[1]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, ContractError::InvalidContract { .. }));
    }

    #[test]
    fn rejects_malformed_document() {
        let err = Contract::parse("{ not json").unwrap_err();
        assert!(matches!(err, ContractError::MalformedDocument(_)));
    }

    #[test]
    fn records_single_accumulation() {
        let c = example();
        let mut ledger = SessionLedger::new(0.0);
        ledger.record_playback(&c, "720p", 2.0).unwrap();
        assert_eq!(ledger.played_s["720p"], 2.0);
        assert_eq!(ledger.rebuffer_count, 0);
    }

    #[test]
    fn records_boundary_fill() {
        let c = example();
        let mut ledger = SessionLedger::new(0.0);
        ledger.record_playback(&c, "720p", 118.0).unwrap();
        ledger.record_playback(&c, "720p", 2.0).unwrap();
        assert_eq!(ledger.played_s["720p"], 120.0);
    }

    #[test]
    fn rejects_window_overflow() {
        let c = example();
        let mut ledger = SessionLedger::new(0.0);
        ledger.record_playback(&c, "720p", 119.0).unwrap();
        let err = ledger.record_playback(&c, "720p", 2.0).unwrap_err();
        assert!(matches!(err, ContractError::WindowOverflow { .. }));
    }

    #[test]
    fn violation_at_strictest_level_and_satisfied_above() {
        let c = example();
        let mut ledger = SessionLedger::new(0.0);
        ledger.record_playback(&c, "720p", 70.0).unwrap();
        ledger.record_playback(&c, "1080p", 50.0).unwrap();
        // 70/120 > 0.5 breaks level 0.
        match ledger.check_level(&c) {
            ContractOutcome::ViolatedAtLevel { level: 0, breach } => match breach {
                Breach::ResolutionCap {
                    resolution, cap, ..
                } => {
                    assert_eq!(resolution, "720p");
                    assert_eq!(cap, 0.5);
                }
                other => panic!("unexpected breach {other:?}"),
            },
            other => panic!("expected level-0 violation, got {other:?}"),
        }
        // 70/120 <= 0.7 satisfies level 1 with the same statistics.
        ledger.level_index = 1;
        assert!(ledger.check_level(&c).is_satisfied());
    }

    #[test]
    fn rebuffering_cap_violation() {
        let c = example();
        let mut ledger = SessionLedger::new(0.0);
        ledger.record_rebuffering();
        assert!(ledger.check_level(&c).is_satisfied());
        ledger.record_rebuffering();
        match ledger.check_level(&c) {
            ContractOutcome::ViolatedAtLevel {
                level: 0,
                breach: Breach::RebufferingCap { count: 2, cap: 1 },
            } => {}
            other => panic!("expected rebuffering breach, got {other:?}"),
        }
    }

    #[test]
    fn unknown_resolution_violates_level() {
        let c = example();
        let mut ledger = SessionLedger::new(0.0);
        ledger.record_playback(&c, "480p", 2.0).unwrap();
        match ledger.check_level(&c) {
            ContractOutcome::ViolatedAtLevel {
                breach: Breach::UnknownResolution { resolution },
                ..
            } => assert_eq!(resolution, "480p"),
            other => panic!("expected unknown-resolution breach, got {other:?}"),
        }
    }

    #[test]
    fn downgrade_preserves_statistics_and_exhausts() {
        let c = example();
        let mut ledger = SessionLedger::new(0.0);
        ledger.record_playback(&c, "720p", 70.0).unwrap();
        assert_eq!(ledger.downgrade(&c), Downgrade::To(1));
        assert_eq!(ledger.played_s["720p"], 70.0);
        assert_eq!(ledger.downgrade(&c), Downgrade::To(2));
        assert_eq!(ledger.downgrade(&c), Downgrade::Exhausted);
        assert!(ledger.exhausted);
        assert_eq!(ledger.final_level(), None);
        // Exhausted windows are terminal: no further constraint.
        assert!(ledger.check_level(&c).is_satisfied());
    }

    #[test]
    fn roll_window_restarts_fresh() {
        let c = example();
        let mut ledger = SessionLedger::new(0.0);
        ledger.record_playback(&c, "720p", 120.0).unwrap();
        ledger.record_rebuffering();
        ledger.level_index = 2;
        ledger.roll_window(120.0);
        assert_eq!(ledger.window_index, 1);
        assert_eq!(ledger.level_index, 0);
        assert!(ledger.played_s.is_empty());
        assert_eq!(ledger.rebuffer_count, 0);
        assert_eq!(ledger.window_start_pts, 120.0);
    }

    #[test]
    fn exhausted_ledger_rolls_to_level_zero() {
        let c = example();
        let mut ledger = SessionLedger::new(0.0);
        while !ledger.exhausted {
            ledger.downgrade(&c);
        }
        ledger.roll_window(120.0);
        assert!(!ledger.exhausted);
        assert_eq!(ledger.level_index, 0);
    }

    #[test]
    fn downgrade_chain_terminates_within_level_count() {
        let c = example();
        let mut ledger = SessionLedger::new(0.0);
        ledger.record_playback(&c, "480p", 10.0).unwrap(); // violates every level
        let mut steps = 0;
        loop {
            match ledger.check_level(&c) {
                ContractOutcome::Satisfied => break,
                ContractOutcome::ViolatedAtLevel { .. } => {
                    steps += 1;
                    if ledger.downgrade(&c) == Downgrade::Exhausted {
                        break;
                    }
                }
            }
            assert!(steps <= c.level_count());
        }
        assert_eq!(steps, c.level_count());
        assert!(ledger.exhausted);
    }

    #[test]
    fn level_monotonicity_within_window() {
        let c = example();
        let mut ledger = SessionLedger::new(0.0);
        let mut last = ledger.level_index;
        for _ in 0..5 {
            ledger.downgrade(&c);
            assert!(ledger.level_index >= last);
            last = ledger.level_index;
        }
    }

    #[test]
    fn all_ones_level_with_large_rebuffer_cap_is_always_satisfied() {
        // The shape of the loosest useful contract: every listed resolution
        // capped at 1, with only the rebuffering cap doing real work.
        let c = Contract::parse(
            r#"{"window":120,
                "resolution":[[["240p",1],["360p",1],["480p",1],["720p",1],["1080p",1]]],
                "rebuffering":[33]}"#,
        )
        .unwrap();
        let mut ledger = SessionLedger::new(0.0);
        ledger.record_playback(&c, "240p", 30.0).unwrap();
        ledger.record_playback(&c, "1080p", 90.0).unwrap();
        for _ in 0..33 {
            ledger.record_rebuffering();
        }
        assert!(ledger.check_level(&c).is_satisfied());
        ledger.record_rebuffering();
        assert!(!ledger.check_level(&c).is_satisfied());
    }

    #[test]
    fn canonical_text_round_trips() {
        let c = example();
        let text = c.canonical_text();
        let reparsed = Contract::parse(&text).unwrap();
        assert_eq!(c, reparsed);
        assert_eq!(text, reparsed.canonical_text());
    }
}
