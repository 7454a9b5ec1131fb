//! Aggregate statistics over corpora of sessions: distribution tables,
//! contract-satisfaction reports, duration-bound validation, sample-size
//! calculation, and a per-session pricing demonstration.
//!
//! Everything here is deterministic and plot-agnostic: outputs are columnar
//! tables or line-delimited records; drawing is left to external tools.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contract::{Contract, ContractError, Level};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error(transparent)]
    Contract(#[from] ContractError),
}

/// Everything the analytics need to know about one session, extractable
/// from either a trace or a replay report.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub group: String,
    /// Offset of the session start on the corpus timeline, seconds.
    pub start_offset_s: f64,
    pub duration_s: f64,
    pub resolution_switches: u32,
    pub rebuffer_durations_s: Vec<f64>,
    /// Piecewise-constant resolution timeline in session-relative video
    /// time: (from_s, to_s, resolution).
    pub timeline: Vec<(f64, f64, String)>,
    pub windows: Vec<WindowRecord>,
    /// Confirmed rebufferings: (client-measured duration, server bound).
    pub bound_pairs: Vec<(f64, f64)>,
    pub terminated: bool,
}

/// Outcome of one contract window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub window_index: u64,
    pub start_pts: f64,
    pub end_pts: f64,
    pub final_level: Option<usize>,
    pub exhausted: bool,
    pub rebuffer_count: u32,
    pub played_s: Vec<(String, f64)>,
}

impl WindowRecord {
    /// Zero-length windows (a session ending exactly on a boundary) carry
    /// no content and are skipped by satisfaction and pricing.
    pub fn is_empty(&self) -> bool {
        self.end_pts - self.start_pts <= 1e-9
    }
}

/// Empirical CDF: (value, cumulative fraction) at each distinct value.
pub type CdfTable = Vec<(f64, f64)>;

pub fn empirical_cdf(values: &[f64]) -> CdfTable {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out: CdfTable = Vec::new();
    for (i, v) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some((last_v, last_f)) if (*last_v - v).abs() <= f64::EPSILON => *last_f = frac,
            _ => out.push((*v, frac)),
        }
    }
    out
}

/// Nearest-rank quantile of a sorted sample.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// The five box-plot quantiles: 5/25/50/75/95%.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub p05: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
}

pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(BoxStats {
        p05: nearest_rank(&sorted, 0.05),
        p25: nearest_rank(&sorted, 0.25),
        p50: nearest_rank(&sorted, 0.50),
        p75: nearest_rank(&sorted, 0.75),
        p95: nearest_rank(&sorted, 0.95),
    })
}

/// The four aggregate distributions reported over a corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistributionReport {
    pub switches_per_minute: CdfTable,
    pub session_duration_s: CdfTable,
    pub rebuffer_events_per_session: CdfTable,
    pub rebuffer_duration_s: CdfTable,
}

pub fn distribution_report(
    corpus: &[SessionSummary],
) -> Result<DistributionReport, AnalyticsError> {
    if corpus.is_empty() {
        return Err(AnalyticsError::EmptyCorpus);
    }
    let switches: Vec<f64> = corpus
        .iter()
        .map(|s| s.resolution_switches as f64 / (s.duration_s / 60.0))
        .collect();
    let durations: Vec<f64> = corpus.iter().map(|s| s.duration_s).collect();
    let rebuffer_counts: Vec<f64> = corpus
        .iter()
        .map(|s| s.rebuffer_durations_s.len() as f64)
        .collect();
    let rebuffer_durations: Vec<f64> = corpus
        .iter()
        .flat_map(|s| s.rebuffer_durations_s.iter().copied())
        .collect();
    Ok(DistributionReport {
        switches_per_minute: empirical_cdf(&switches),
        session_duration_s: empirical_cdf(&durations),
        rebuffer_events_per_session: empirical_cdf(&rebuffer_counts),
        rebuffer_duration_s: empirical_cdf(&rebuffer_durations),
    })
}

/// Grouped box-plot variant: the same four statistics as quantiles per
/// group key.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub sessions: usize,
    pub switches_per_minute: BoxStats,
    pub session_duration_s: BoxStats,
    pub rebuffer_events_per_session: BoxStats,
    pub rebuffer_duration_s: Option<BoxStats>,
}

pub fn grouped_report(corpus: &[SessionSummary]) -> Result<Vec<GroupReport>, AnalyticsError> {
    if corpus.is_empty() {
        return Err(AnalyticsError::EmptyCorpus);
    }
    let mut by_group: BTreeMap<&str, Vec<&SessionSummary>> = BTreeMap::new();
    for s in corpus {
        by_group.entry(&s.group).or_default().push(s);
    }
    Ok(by_group
        .into_iter()
        .map(|(group, sessions)| {
            let switches: Vec<f64> = sessions
                .iter()
                .map(|s| s.resolution_switches as f64 / (s.duration_s / 60.0))
                .collect();
            let durations: Vec<f64> = sessions.iter().map(|s| s.duration_s).collect();
            let counts: Vec<f64> = sessions
                .iter()
                .map(|s| s.rebuffer_durations_s.len() as f64)
                .collect();
            let stall_durations: Vec<f64> = sessions
                .iter()
                .flat_map(|s| s.rebuffer_durations_s.iter().copied())
                .collect();
            GroupReport {
                group: group.to_string(),
                sessions: sessions.len(),
                switches_per_minute: box_stats(&switches).expect("non-empty group"),
                session_duration_s: box_stats(&durations).expect("non-empty group"),
                rebuffer_events_per_session: box_stats(&counts).expect("non-empty group"),
                rebuffer_duration_s: box_stats(&stall_durations),
            }
        })
        .collect())
}

/// Mean quality of the active streams per time bucket: the timeline a
/// synthetic average viewer would have experienced. Quality is the rank of
/// the resolution in `ladder` (higher is better).
pub fn time_bucket_quality(
    corpus: &[SessionSummary],
    ladder: &[&str],
    bucket_s: f64,
) -> Result<Vec<(f64, f64)>, AnalyticsError> {
    if corpus.is_empty() {
        return Err(AnalyticsError::EmptyCorpus);
    }
    if !(bucket_s > 0.0) {
        return Err(AnalyticsError::InvalidParameters(
            "bucket must be positive".into(),
        ));
    }
    let rank = |res: &str| ladder.iter().position(|l| *l == res).map(|i| i as f64);
    let horizon = corpus
        .iter()
        .map(|s| s.start_offset_s + s.duration_s)
        .fold(0.0f64, f64::max);
    let buckets = (horizon / bucket_s).ceil() as usize;
    let mut sums = vec![0.0f64; buckets];
    let mut weights = vec![0.0f64; buckets];
    for s in corpus {
        for (from, to, res) in &s.timeline {
            let Some(q) = rank(res) else { continue };
            let (abs_from, abs_to) = (s.start_offset_s + from, s.start_offset_s + to);
            let first = (abs_from / bucket_s).floor() as usize;
            let last = ((abs_to / bucket_s).ceil() as usize).min(buckets);
            for b in first..last {
                let lo = abs_from.max(b as f64 * bucket_s);
                let hi = abs_to.min((b + 1) as f64 * bucket_s);
                if hi > lo {
                    sums[b] += q * (hi - lo);
                    weights[b] += hi - lo;
                }
            }
        }
    }
    Ok(sums
        .iter()
        .zip(&weights)
        .enumerate()
        .filter(|(_, (_, w))| **w > 0.0)
        .map(|(b, (sum, w))| (b as f64 * bucket_s, sum / w))
        .collect())
}

/// Per-group fraction of sessions whose every (non-empty) window ended
/// satisfied at some level, i.e. never exhausted and never terminated.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SatisfactionReport {
    pub per_group: Vec<(String, f64, usize)>,
    pub overall_fraction: f64,
    /// The most restrictive contract every session of the corpus satisfies:
    /// caps of 1 for every observed resolution, rebuffering cap equal to
    /// the worst per-window count observed.
    pub most_restrictive_satisfied_by_all: String,
}

pub fn session_satisfied(s: &SessionSummary) -> bool {
    !s.terminated
        && s.windows
            .iter()
            .filter(|w| !w.is_empty())
            .all(|w| !w.exhausted && w.final_level.is_some())
}

pub fn satisfaction_report(
    corpus: &[SessionSummary],
    window_s: f64,
) -> Result<SatisfactionReport, AnalyticsError> {
    if corpus.is_empty() {
        return Err(AnalyticsError::EmptyCorpus);
    }
    let mut by_group: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for s in corpus {
        let e = by_group.entry(&s.group).or_insert((0, 0));
        e.1 += 1;
        if session_satisfied(s) {
            e.0 += 1;
        }
    }
    let satisfied_total: usize = by_group.values().map(|(s, _)| s).sum();
    let per_group = by_group
        .into_iter()
        .map(|(g, (sat, n))| (g.to_string(), sat as f64 / n as f64, n))
        .collect();
    let most_restrictive = synthesize_most_restrictive(corpus, window_s)?;
    Ok(SatisfactionReport {
        per_group,
        overall_fraction: satisfied_total as f64 / corpus.len() as f64,
        most_restrictive_satisfied_by_all: most_restrictive.canonical_text(),
    })
}

/// Single-level contract with every observed resolution capped at 1 and the
/// rebuffering cap set to the worst per-window count in the corpus.
pub fn synthesize_most_restrictive(
    corpus: &[SessionSummary],
    window_s: f64,
) -> Result<Contract, AnalyticsError> {
    let mut labels: BTreeSet<&str> = BTreeSet::new();
    let mut worst_rebuffers = 0u32;
    for s in corpus {
        for w in &s.windows {
            worst_rebuffers = worst_rebuffers.max(w.rebuffer_count);
            for (label, _) in &w.played_s {
                labels.insert(label);
            }
        }
        for (_, _, label) in &s.timeline {
            labels.insert(label);
        }
    }
    if labels.is_empty() {
        return Err(AnalyticsError::EmptyCorpus);
    }
    let caps = labels.into_iter().map(|l| (l.to_string(), 1.0)).collect();
    Ok(Contract::new(
        window_s,
        vec![Level::new(caps)],
        vec![worst_rebuffers],
    )?)
}

/// Per-event ratio of the client-measured rebuffering duration to the
/// server's upper bound, with the honest-run summary statistic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DurationBoundReport {
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
    pub events: usize,
}

pub fn duration_bound_report(corpus: &[SessionSummary]) -> DurationBoundReport {
    let ratios: Vec<f64> = corpus
        .iter()
        .flat_map(|s| s.bound_pairs.iter())
        .map(|(duration, bound)| duration / bound)
        .collect();
    let max_ratio = ratios.iter().copied().fold(0.0f64, f64::max);
    DurationBoundReport {
        events: ratios.len(),
        ratios,
        max_ratio,
    }
}

/// Inverse CDF of the standard normal distribution, via the classic
/// rational approximation (relative error below 1e-9 on (0, 1)).
pub fn standard_normal_quantile(p: f64) -> Result<f64, AnalyticsError> {
    if !(0.0..=1.0).contains(&p) || p == 0.0 || p == 1.0 {
        return Err(AnalyticsError::InvalidParameters(format!(
            "quantile probability {p} outside (0, 1)"
        )));
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -((((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0))
    };
    Ok(x)
}

/// Sample size for estimating a proportion: `n = Z^2 p (1-p) / margin^2`,
/// rounded to the nearest integer. Nearest rounding reproduces the
/// published anchor n(0.95, 0.05, 0.5) = 384.
pub fn cochran_sample_size(confidence: f64, margin: f64, p: f64) -> Result<u64, AnalyticsError> {
    if !(0.0 < confidence && confidence < 1.0) {
        return Err(AnalyticsError::InvalidParameters(format!(
            "confidence {confidence} outside (0, 1)"
        )));
    }
    if !(0.0 < margin && margin <= 1.0) {
        return Err(AnalyticsError::InvalidParameters(format!(
            "margin {margin} outside (0, 1]"
        )));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(AnalyticsError::InvalidParameters(format!(
            "p {p} outside [0, 1]"
        )));
    }
    let alpha = 1.0 - confidence;
    let z = standard_normal_quantile(1.0 - alpha / 2.0)?;
    let n = z * z * p * (1.0 - p) / (margin * margin);
    Ok(n.round() as u64)
}

/// Prices one session from its per-window outcomes: `schedule[level]` per
/// satisfied window, `exhausted_price` for exhausted ones. Zero-length
/// windows are free. Only completed (recorded) windows are priced, which
/// for terminated sessions means the windows closed before termination.
pub fn price_session(windows: &[WindowRecord], schedule: &[f64], exhausted_price: f64) -> f64 {
    windows
        .iter()
        .filter(|w| !w.is_empty())
        .map(|w| match w.final_level {
            Some(level) => schedule.get(level).copied().unwrap_or(0.0),
            None => exhausted_price,
        })
        .sum()
}
