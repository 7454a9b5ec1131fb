//! Injectable dishonesty for replays.
//!
//! Each script entry arms one behavior on one side of one session at a
//! given session time. Client-side behaviors fabricate events, delay
//! acknowledgments, or claim a reset the server never saw; server-monitor
//! behaviors deny a real event or silently drop a verdict.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FaultError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fault", rename_all = "snake_case")]
pub enum FaultBehavior {
    /// The client monitor reports an event that never happened.
    FabricateEvent { kind: FabricatedKind, pts: f64 },
    /// The server monitor disputes the next event it would have confirmed.
    DenyEvent,
    /// The client delays every acknowledgment by this much while still
    /// consuming chunks on schedule.
    DelayAcks { extra_delay_s: f64 },
    /// The server monitor swallows its next verdict.
    DropVerdict,
    /// The client claims an out-of-order reset the server never saw.
    OneSidedReset { new_start_pts: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FabricatedKind {
    Rebuffering,
    /// A resolution-change claim with a deliberately wrong label.
    ResolutionChange {
        resolution: String,
    },
}

impl FaultBehavior {
    /// Which side of the session carries the behavior out.
    pub fn client_side(&self) -> bool {
        matches!(
            self,
            FaultBehavior::FabricateEvent { .. }
                | FaultBehavior::DelayAcks { .. }
                | FaultBehavior::OneSidedReset { .. }
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            FaultBehavior::FabricateEvent { .. } => "fabricate_event",
            FaultBehavior::DenyEvent => "deny_event",
            FaultBehavior::DelayAcks { .. } => "delay_acks",
            FaultBehavior::DropVerdict => "drop_verdict",
            FaultBehavior::OneSidedReset { .. } => "one_sided_reset",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultScript {
    /// Target session, or every session when absent.
    pub session_id: Option<String>,
    pub behavior: FaultBehavior,
    /// Session time at which the behavior arms.
    pub activation_s: f64,
}

impl FaultScript {
    pub fn applies_to(&self, session_id: &str) -> bool {
        self.session_id
            .as_deref()
            .map_or(true, |id| id == session_id)
    }
}

pub fn save_faults(path: &Path, faults: &[FaultScript]) -> Result<(), FaultError> {
    let mut w = BufWriter::new(File::create(path)?);
    for f in faults {
        writeln!(w, "{}", serde_json::to_string(f).expect("serializes"))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_faults(path: &Path) -> Result<Vec<FaultScript>, FaultError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: FaultScript = serde_json::from_str(&line).map_err(|e| FaultError::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        out.push(f);
    }
    Ok(out)
}
