//! The server monitor's conservative reconstruction of the client player
//! buffer.
//!
//! The server cannot see the client's player. What it can see is when it
//! started sending each chunk and when the client's acknowledgment for each
//! chunk arrived. The virtual buffer assumes the worst case: that the client
//! starts playing a chunk the moment the server starts sending it. Under
//! that assumption a rebuffering after chunk A must be confirmed whenever
//! `t_send(A) + length(A) <= t_ack(B)` for the following chunk B. The test
//! can fire when no real stall happened, but it can never miss a real one,
//! which is the asymmetry the whole protocol leans on: the client claims,
//! the server only confirms or disputes.
//!
//! Timestamps here are server-local clock readings in seconds; `pts` is
//! video time. The two domains are never compared with each other.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance when matching presentation timestamps.
pub const PTS_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum BufferError {
    /// A served byte range that the configuration cannot resolve; signals a
    /// misconfigured or hostile server.
    #[error("unknown byte range {0}..{1}")]
    UnknownByteRange(u64, u64),
    /// A served chunk whose pts does not continue the sequence; this is the
    /// out-of-order signal that triggers the session-reset path.
    #[error("non-contiguous pts: expected {expected}, got {got}")]
    NonContiguousPts { expected: f64, got: f64 },
    /// t_send going backwards between consecutive sends.
    #[error("non-monotone send timestamp: {got} after {prev}")]
    NonMonotoneSend { prev: f64, got: f64 },
    #[error("acknowledgment for unknown chunk {0}")]
    UnknownChunk(u64),
    #[error("duplicate acknowledgment for chunk {0}")]
    DuplicateAck(u64),
    /// Acks must arrive in chunk order on the single ordered connection.
    #[error("acknowledgment for chunk {got} before chunk {expected}")]
    NonMonotoneAck { expected: u64, got: u64 },
    #[error("acknowledgment at {t_ack} precedes send at {t_send}")]
    AckBeforeSend { t_send: f64, t_ack: f64 },
    /// The successor's ack has not arrived; confirmation must wait.
    #[error("missing acknowledgment for chunk {0}")]
    MissingAck(u64),
    /// A pts not covered by any buffered chunk; a claim about unserved
    /// content.
    #[error("pts {0} outside the buffered range")]
    OutOfBuffer(f64),
    #[error("overlapping byte range {0}..{1} in chunk map")]
    OverlappingRange(u64, u64),
    #[error("invalid chunk map entry for range {0}..{1}")]
    InvalidMapEntry(u64, u64),
}

/// Metadata the server configuration attaches to one hosted byte range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkMeta {
    pub resolution: String,
    pub length_s: f64,
    pub pts: f64,
}

/// Map from hosted byte ranges to chunk metadata. Ranges are disjoint and
/// every served range must resolve exactly. Lookups are on the hot
/// per-chunk path, so an index by range start backs them in O(1).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ChunkMap {
    ranges: BTreeMap<u64, (u64, ChunkMeta)>,
    #[serde(skip)]
    index: HashMap<u64, (u64, ChunkMeta)>,
}

impl ChunkMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, start: u64, end: u64, meta: ChunkMeta) -> Result<(), BufferError> {
        if start >= end || !(meta.length_s > 0.0) {
            return Err(BufferError::InvalidMapEntry(start, end));
        }
        if let Some((&prev_start, &(prev_end, _))) = self.ranges.range(..=start).next_back() {
            if prev_end > start && !(prev_start == start && prev_end == end) {
                return Err(BufferError::OverlappingRange(start, end));
            }
        }
        if let Some((&next_start, _)) = self.ranges.range(start..).next() {
            if next_start < end && next_start != start {
                return Err(BufferError::OverlappingRange(start, end));
            }
        }
        // Re-inserting an identical range is idempotent; the same chunk is
        // shared by every session that streams it.
        self.ranges.insert(start, (end, meta.clone()));
        self.index.insert(start, (end, meta));
        Ok(())
    }

    pub fn resolve(&self, start: u64, end: u64) -> Result<&ChunkMeta, BufferError> {
        let hit = if self.index.len() == self.ranges.len() {
            self.index.get(&start)
        } else {
            // Deserialized maps carry only the ordered store.
            self.ranges.get(&start)
        };
        match hit {
            Some((e, meta)) if *e == end => Ok(meta),
            _ => Err(BufferError::UnknownByteRange(start, end)),
        }
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, u64, &ChunkMeta)> {
        self.ranges.iter().map(|(&s, (e, m))| (s, *e, m))
    }
}

/// One served chunk as the server monitor sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub chunk_id: u64,
    pub byte_range: (u64, u64),
    pub resolution: String,
    pub pts: f64,
    pub length_s: f64,
    pub t_send: f64,
    pub t_ack: Option<f64>,
}

impl ChunkRecord {
    pub fn end_pts(&self) -> f64 {
        self.pts + self.length_s
    }
}

/// Ordered sequence of served chunks with their send and ack timestamps.
#[derive(Debug, Clone, Default)]
pub struct VirtualBuffer {
    entries: VecDeque<ChunkRecord>,
    next_chunk_id: u64,
    /// Chunk id of the next expected in-order acknowledgment.
    next_ack_id: u64,
}

impl VirtualBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> impl Iterator<Item = &ChunkRecord> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn first(&self) -> Option<&ChunkRecord> {
        self.entries.front()
    }

    pub fn last(&self) -> Option<&ChunkRecord> {
        self.entries.back()
    }

    /// Records that the server began sending `byte_range` at `t_send`.
    /// Returns the appended record. A pts that does not continue the
    /// sequence comes back as `NonContiguousPts`, the signal for the
    /// out-of-order reset path.
    pub fn on_chunk_sent(
        &mut self,
        map: &ChunkMap,
        byte_range: (u64, u64),
        t_send: f64,
    ) -> Result<&ChunkRecord, BufferError> {
        let meta = map.resolve(byte_range.0, byte_range.1)?;
        if let Some(last) = self.entries.back() {
            let expected = last.end_pts();
            if (meta.pts - expected).abs() > PTS_EPS {
                return Err(BufferError::NonContiguousPts {
                    expected,
                    got: meta.pts,
                });
            }
            if t_send < last.t_send {
                return Err(BufferError::NonMonotoneSend {
                    prev: last.t_send,
                    got: t_send,
                });
            }
        }
        let record = ChunkRecord {
            chunk_id: self.next_chunk_id,
            byte_range,
            resolution: meta.resolution.clone(),
            pts: meta.pts,
            length_s: meta.length_s,
            t_send,
            t_ack: None,
        };
        self.next_chunk_id += 1;
        self.entries.push_back(record);
        Ok(self.entries.back().expect("just pushed"))
    }

    /// Records the arrival of the client's acknowledgment for `chunk_id`.
    pub fn on_ack(&mut self, chunk_id: u64, t_ack: f64) -> Result<(), BufferError> {
        if chunk_id != self.next_ack_id {
            if chunk_id < self.next_ack_id {
                // Either already acked (still buffered or trimmed away).
                return Err(BufferError::DuplicateAck(chunk_id));
            }
            if self.find(chunk_id).is_none() {
                return Err(BufferError::UnknownChunk(chunk_id));
            }
            return Err(BufferError::NonMonotoneAck {
                expected: self.next_ack_id,
                got: chunk_id,
            });
        }
        let entry = match self.find_mut(chunk_id) {
            Some(e) => e,
            None => return Err(BufferError::UnknownChunk(chunk_id)),
        };
        if entry.t_ack.is_some() {
            return Err(BufferError::DuplicateAck(chunk_id));
        }
        if t_ack < entry.t_send {
            return Err(BufferError::AckBeforeSend {
                t_send: entry.t_send,
                t_ack,
            });
        }
        entry.t_ack = Some(t_ack);
        self.next_ack_id = chunk_id + 1;
        Ok(())
    }

    pub fn find(&self, chunk_id: u64) -> Option<&ChunkRecord> {
        let front = self.entries.front()?.chunk_id;
        let idx = chunk_id.checked_sub(front)? as usize;
        self.entries.get(idx)
    }

    fn find_mut(&mut self, chunk_id: u64) -> Option<&mut ChunkRecord> {
        let front = self.entries.front()?.chunk_id;
        let idx = chunk_id.checked_sub(front)? as usize;
        self.entries.get_mut(idx)
    }

    /// The chunk following `chunk_id` in the buffer, if already sent.
    pub fn successor(&self, chunk_id: u64) -> Option<&ChunkRecord> {
        self.find(chunk_id + 1)
    }

    /// The chunk whose playback ends at `pts` (where a stall would begin).
    pub fn chunk_ending_at(&self, pts: f64) -> Option<&ChunkRecord> {
        let idx = self
            .entries
            .partition_point(|e| e.end_pts() < pts - PTS_EPS);
        self.entries
            .get(idx)
            .filter(|e| (e.end_pts() - pts).abs() <= PTS_EPS)
    }

    /// The chunk whose playback begins at `pts`, if any.
    pub fn chunk_starting_at(&self, pts: f64) -> Option<&ChunkRecord> {
        let idx = self.entries.partition_point(|e| e.pts < pts - PTS_EPS);
        self.entries
            .get(idx)
            .filter(|e| (e.pts - pts).abs() <= PTS_EPS)
    }

    /// The buffered entry that precedes `chunk_id`, if still retained.
    pub fn predecessor(&self, chunk_id: u64) -> Option<&ChunkRecord> {
        chunk_id.checked_sub(1).and_then(|id| self.find(id))
    }

    /// Resolution playing at `pts`. Intervals are half-open
    /// `[pts, pts + length)`, so a chunk boundary reports the newer chunk.
    pub fn resolution_at(&self, pts: f64) -> Result<&str, BufferError> {
        let idx = self
            .entries
            .partition_point(|e| e.end_pts() <= pts + PTS_EPS);
        match self.entries.get(idx) {
            Some(e) if e.pts <= pts + PTS_EPS => Ok(&e.resolution),
            _ => Err(BufferError::OutOfBuffer(pts)),
        }
    }

    pub fn end_pts(&self) -> Option<f64> {
        self.entries.back().map(|e| e.end_pts())
    }

    /// Wipes the buffer entirely. The next served chunk starts a fresh
    /// sequence, as if the session had just begun.
    pub fn reset(&mut self) {
        self.entries.clear();
        // Chunk ids keep increasing across resets so that stale
        // acknowledgments cannot alias new chunks.
        self.next_ack_id = self.next_chunk_id;
    }

    /// Drops entries that end at or before `window_start_pts`, keeping one
    /// predecessor chunk for the adjacency test at the window's first
    /// chunk. Bounds per-session memory to roughly one contract window.
    pub fn trim_before_window(&mut self, window_start_pts: f64) {
        let first_needed = self
            .entries
            .partition_point(|e| e.end_pts() <= window_start_pts + PTS_EPS);
        let keep_from = first_needed.saturating_sub(1);
        for _ in 0..keep_from {
            self.entries.pop_front();
        }
    }

    /// Per-resolution seconds of content within `[window_start, window_end)`,
    /// clipping chunks that straddle a boundary.
    pub fn played_seconds_in_window(
        &self,
        window_start: f64,
        window_end: f64,
    ) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            let lo = e.pts.max(window_start);
            let hi = e.end_pts().min(window_end);
            if hi - lo > PTS_EPS {
                *out.entry(e.resolution.clone()).or_insert(0.0) += hi - lo;
            }
        }
        out
    }

    /// Resolution changes with pts in `[window_start, through_pts)`: every
    /// chunk whose resolution differs from its predecessor's. The upper end
    /// is exclusive — a change exactly at the horizon belongs to content
    /// not yet played, which the claiming side may not even have received.
    /// The very first chunk of a sequence has no predecessor and is never
    /// a change.
    pub fn change_list(&self, window_start: f64, through_pts: f64) -> Vec<(f64, String)> {
        let mut out = Vec::new();
        for pair in self.entries.iter().zip(self.entries.iter().skip(1)) {
            let (prev, cur) = pair;
            if cur.resolution != prev.resolution
                && cur.pts >= window_start - PTS_EPS
                && cur.pts < through_pts - PTS_EPS
            {
                out.push((cur.pts, cur.resolution.clone()));
            }
        }
        out
    }
}

/// Whether the server monitor must confirm a client-reported rebuffering at
/// the end of chunk `a`, given its successor `b`. The boundary is
/// inclusive: an ack landing exactly at the expected end still confirms.
pub fn must_confirm_rebuffering(a: &ChunkRecord, b: &ChunkRecord) -> Result<bool, BufferError> {
    debug_assert_eq!(b.chunk_id, a.chunk_id + 1, "b must be a's successor");
    let t_ack_b = b.t_ack.ok_or(BufferError::MissingAck(b.chunk_id))?;
    Ok(a.t_send + a.length_s <= t_ack_b)
}

/// Upper bound on the duration of a confirmed rebuffering after chunk `a`:
/// `t_ack(B) - t_send(A) - length(A) + c`, where `c` is the agreed
/// allowance for the client to insert a received chunk into its player
/// buffer. Any honest client-reported duration is at most this value.
pub fn rebuffering_upper_bound(
    a: &ChunkRecord,
    b: &ChunkRecord,
    c: f64,
) -> Result<f64, BufferError> {
    debug_assert!(c >= 0.0);
    let t_ack_b = b.t_ack.ok_or(BufferError::MissingAck(b.chunk_id))?;
    Ok(t_ack_b - a.t_send - a.length_s + c)
}

/// Default insertion-delay allowance agreed at bootstrap, in seconds.
pub const DEFAULT_INSERTION_ALLOWANCE_S: f64 = 0.015;
