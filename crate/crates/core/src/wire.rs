//! Bootstrap handshake and monitor/auditor message encodings.
//!
//! Control messages are compact JSON records, one object per frame, behind
//! a 4-byte big-endian length prefix over an ordered reliable byte stream.
//! The frame layer, not the body, guarantees boundaries; bodies stay
//! human-auditable so that replay fixtures can be inspected directly.
//!
//! The bootstrap rides on the first HTTP(S) exchange of the video session:
//! the client's first request proposes monitoring with one extra header and
//! the server, if it participates, answers with two extra headers carrying
//! the contract document and the auditor's address. Monitoring engages only
//! when both sides play along; otherwise the session proceeds untouched.

use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contract::{Contract, ContractError};

pub const PROTOCOL_VERSION: u16 = 1;
/// Hard cap on a single control frame.
pub const MAX_FRAME_BYTES: usize = 64 * 1024;

/// Header on the client's first request proposing the use of monitoring.
pub const HDR_PROPOSE: &str = "X-UgoVor-Propose";
/// Server header carrying the base64 of the contract's canonical text.
pub const HDR_CONTRACT: &str = "X-UgoVor-Contract";
/// Server header carrying the auditor's `host:port`.
pub const HDR_AUDITOR: &str = "X-UgoVor-Auditor";

#[derive(Debug, Error)]
pub enum WireError {
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_BYTES} byte limit")]
    FrameTooLarge(usize),
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u16),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    InvalidContract(#[from] ContractError),
}

/// Who is speaking on a control connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    ClientMonitor,
    ServerMonitor,
}

/// An event of interest detected by the client monitor, or one of the
/// session-lifecycle notifications that ride the same channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ClientEvent {
    /// A player stall. The duration is absent while the stall is still in
    /// progress and reported in a follow-up once it ends.
    Rebuffering {
        pts: f64,
        duration_s: Option<f64>,
    },
    ResolutionChange {
        pts: f64,
        resolution: String,
    },
    /// A contract level was violated; carries the resolution changes of the
    /// current window up to the detection horizon.
    ContractViolation {
        window_index: u64,
        level: usize,
        through_pts: f64,
        changes: Vec<(f64, String)>,
    },
    /// A contract window closed (or the session ended mid-window when
    /// `is_final`), with the client's accounting for it.
    WindowEnd {
        window_index: u64,
        start_pts: f64,
        end_pts: f64,
        final_level: Option<usize>,
        exhausted: bool,
        played_s: Vec<(String, f64)>,
        rebuffer_count: u32,
        is_final: bool,
    },
}

impl ClientEvent {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ClientEvent::Rebuffering { .. } => "rebuffering",
            ClientEvent::ResolutionChange { .. } => "resolution_change",
            ClientEvent::ContractViolation { .. } => "contract_violation",
            ClientEvent::WindowEnd { .. } => "window_end",
        }
    }
}

/// Auditor's question to the server monitor, mirroring the client's claim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "query", rename_all = "snake_case")]
pub enum MonitorQuery {
    ConfirmRebuffering {
        pts: f64,
        claimed_duration_s: Option<f64>,
    },
    ConfirmResolutionChange {
        pts: f64,
        resolution: String,
    },
    ConfirmViolation {
        window_index: u64,
        window_start_pts: f64,
        through_pts: f64,
        changes: Vec<(f64, String)>,
    },
    ConfirmWindowEnd {
        window_index: u64,
        start_pts: f64,
        end_pts: f64,
        played_s: Vec<(String, f64)>,
        rebuffer_count: u32,
    },
}

/// The server monitor's side of the story.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Verdict {
    /// The claim matches the server's records. For rebufferings the
    /// computed duration upper bound rides along as evidence.
    Confirm { upper_bound_s: Option<f64> },
    /// The claim contradicts the server's records.
    Dispute { reason: String },
    /// The records needed to judge the claim have not arrived yet; the
    /// auditor restarts its reply timer once.
    Deferred,
}

/// Auditor decision broadcast to both monitors after agreement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "sync", rename_all = "snake_case")]
pub enum SyncAction {
    /// The event was confirmed; the session proceeds unchanged.
    Proceed { event_seq: u64 },
    /// A violation was confirmed; monitoring continues at `to_level`, or
    /// the window is exhausted when `to_level` is `None`.
    Downgraded {
        event_seq: u64,
        window_index: u64,
        to_level: Option<usize>,
    },
    /// A window closed; monitors roll their ledgers and the server monitor
    /// trims its buffer to the new window start.
    WindowRolled {
        event_seq: u64,
        window_index: u64,
        next_start_pts: f64,
    },
    /// Both sides reported the out-of-order condition; state is reset and a
    /// fresh window starts at `new_start_pts`.
    ResetApplied { new_start_pts: f64 },
    /// Graceful end of the session.
    Closed,
}

/// Why a session was interrupted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum TerminateReason {
    /// The parties disagreed about an event.
    Dispute { event_kind: String, detail: String },
    /// The server monitor never answered within the reply budget.
    Timeout { event_kind: String },
    /// A message violated the protocol itself.
    ProtocolError { detail: String },
    /// Only one side reported a session reset within the grace period.
    OneSidedReset { origin: Role },
    /// The server monitor reported inconsistent client behavior.
    Misbehavior { detail: String },
}

/// Evidence for delayed-acknowledgment detection: the client keeps
/// confirming chunks whose bitrate its own acks say it could not sustain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisbehaviorReport {
    pub window_chunks: usize,
    pub ack_throughput_bps: f64,
    pub consumed_bitrate_bps: f64,
    pub ratio: f64,
    pub detail: String,
}

/// One control message. `seq` increases strictly per (session, sender).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub version: u16,
    pub session_id: String,
    pub seq: u64,
    pub body: Body,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Body {
    Hello {
        role: Role,
        contract_text: String,
    },
    Notify {
        event: ClientEvent,
    },
    Query {
        query: MonitorQuery,
    },
    Verdict {
        verdict: Verdict,
        query: MonitorQuery,
    },
    Sync {
        action: SyncAction,
    },
    Terminate {
        reason: TerminateReason,
    },
    Reset {
        origin: Role,
        new_start_pts: f64,
    },
    Misbehavior {
        report: MisbehaviorReport,
    },
}

impl WireMessage {
    pub fn new(session_id: impl Into<String>, seq: u64, body: Body) -> Self {
        Self {
            version: PROTOCOL_VERSION,
            session_id: session_id.into(),
            seq,
            body,
        }
    }
}

/// Encodes a message as one length-prefixed frame.
pub fn encode(msg: &WireMessage) -> Result<Vec<u8>, WireError> {
    let body = serde_json::to_vec(msg).map_err(|e| WireError::MalformedFrame(e.to_string()))?;
    if body.len() > MAX_FRAME_BYTES {
        return Err(WireError::FrameTooLarge(body.len()));
    }
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u16,
}

/// Decodes the payload of one frame (without the length prefix).
pub fn decode_payload(payload: &[u8]) -> Result<WireMessage, WireError> {
    let probe: VersionProbe =
        serde_json::from_slice(payload).map_err(|e| WireError::MalformedFrame(e.to_string()))?;
    if probe.version != PROTOCOL_VERSION {
        return Err(WireError::UnsupportedVersion(probe.version));
    }
    serde_json::from_slice(payload).map_err(|e| WireError::MalformedFrame(e.to_string()))
}

/// Decodes one complete frame, returning the message and bytes consumed.
pub fn decode(frame: &[u8]) -> Result<(WireMessage, usize), WireError> {
    if frame.len() < 4 {
        return Err(WireError::MalformedFrame("truncated length prefix".into()));
    }
    let len = u32::from_be_bytes([frame[0], frame[1], frame[2], frame[3]]) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(WireError::FrameTooLarge(len));
    }
    if frame.len() < 4 + len {
        return Err(WireError::MalformedFrame(format!(
            "truncated frame: need {} bytes, have {}",
            4 + len,
            frame.len()
        )));
    }
    let msg = decode_payload(&frame[4..4 + len])?;
    Ok((msg, 4 + len))
}

/// Reads one length-prefixed raw frame from a blocking stream. Returns
/// `Ok(None)` on a clean end of stream at a frame boundary.
pub fn read_raw_frame(r: &mut impl Read) -> Result<Option<Vec<u8>>, WireError> {
    let mut len_buf = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len_buf[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(WireError::MalformedFrame(
                    "stream ended inside a length prefix".into(),
                ))
            }
            Ok(n) => got += n,
            Err(e) => return Err(WireError::Io(e)),
        }
    }
    let len = u32::from_be_bytes(len_buf) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(WireError::FrameTooLarge(len));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(Some(payload))
}

/// The contract and auditor address extracted from a successful bootstrap.
#[derive(Debug, Clone, PartialEq)]
pub struct Engagement {
    pub contract: Contract,
    pub auditor_addr: String,
}

/// Builds the client's propose header for its first request.
pub fn propose_header() -> (String, String) {
    (HDR_PROPOSE.to_string(), "1".to_string())
}

/// Headers a participating server adds to its first response.
pub fn bootstrap_response_headers(
    contract: &Contract,
    auditor_addr: &str,
) -> Vec<(String, String)> {
    use base64::Engine as _;
    let b64 = base64::engine::general_purpose::STANDARD.encode(contract.canonical_text());
    vec![
        (HDR_CONTRACT.to_string(), b64),
        (HDR_AUDITOR.to_string(), auditor_addr.to_string()),
    ]
}

fn header<'a>(headers: &'a [(String, String)], name: &str) -> Option<&'a str> {
    headers
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case(name))
        .map(|(_, v)| v.as_str())
}

/// Whether a first request proposes monitoring.
pub fn request_proposes(headers: &[(String, String)]) -> bool {
    header(headers, HDR_PROPOSE).is_some()
}

/// Reads the server's first-response headers. `Ok(None)` means the server
/// did not engage (no headers, or only one of the pair) and the monitor
/// disengages from the rest of the session. An undecodable or invalid
/// contract is an error: the monitor also disengages, but the condition is
/// worth logging.
pub fn bootstrap_client(
    response_headers: &[(String, String)],
) -> Result<Option<Engagement>, WireError> {
    use base64::Engine as _;
    let (contract_b64, auditor_addr) = match (
        header(response_headers, HDR_CONTRACT),
        header(response_headers, HDR_AUDITOR),
    ) {
        (Some(c), Some(a)) => (c, a),
        // The two headers appear together or not at all.
        _ => return Ok(None),
    };
    let text = base64::engine::general_purpose::STANDARD
        .decode(contract_b64)
        .map_err(|e| WireError::MalformedFrame(format!("contract header: {e}")))?;
    let text = String::from_utf8(text)
        .map_err(|e| WireError::MalformedFrame(format!("contract header: {e}")))?;
    let contract = Contract::parse(&text)?;
    Ok(Some(Engagement {
        contract,
        auditor_addr: auditor_addr.to_string(),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture_contract() -> Contract {
        Contract::parse(
            r#"{"window":120,
                "resolution":[[["720p",0.5],["1080p",1],["4K",1]],
                              [["720p",0.7],["1080p",1],["4K",1]],
                              [["720p",0.9],["1080p",1],["4K",1]]],
                "rebuffering":[1,5,10]}"#,
        )
        .unwrap()
    }

    #[test]
    fn notify_round_trips() {
        let msg = WireMessage::new(
            "s1",
            7,
            Body::Notify {
                event: ClientEvent::Rebuffering {
                    pts: 2.0,
                    duration_s: Some(1.015),
                },
            },
        );
        let frame = encode(&msg).unwrap();
        let (decoded, consumed) = decode(&frame).unwrap();
        assert_eq!(consumed, frame.len());
        assert_eq!(decoded, msg);
    }

    #[test]
    fn truncated_frame_is_malformed() {
        let msg = WireMessage::new(
            "s1",
            1,
            Body::Sync {
                action: SyncAction::Closed,
            },
        );
        let frame = encode(&msg).unwrap();
        let err = decode(&frame[..frame.len() - 3]).unwrap_err();
        assert!(matches!(err, WireError::MalformedFrame(_)));
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let mut msg = WireMessage::new(
            "s1",
            1,
            Body::Sync {
                action: SyncAction::Closed,
            },
        );
        msg.version = 99;
        let payload = serde_json::to_vec(&msg).unwrap();
        let mut frame = (payload.len() as u32).to_be_bytes().to_vec();
        frame.extend_from_slice(&payload);
        let err = decode(&frame).unwrap_err();
        assert!(matches!(err, WireError::UnsupportedVersion(99)));
    }

    #[test]
    fn oversized_frame_is_rejected() {
        let msg = WireMessage::new(
            "s1",
            1,
            Body::Terminate {
                reason: TerminateReason::ProtocolError {
                    detail: "x".repeat(MAX_FRAME_BYTES),
                },
            },
        );
        let err = encode(&msg).unwrap_err();
        assert!(matches!(err, WireError::FrameTooLarge(_)));
    }

    #[test]
    fn bootstrap_with_both_headers_engages() {
        let contract = fixture_contract();
        let headers = bootstrap_response_headers(&contract, "10.0.0.5:7400");
        let engaged = bootstrap_client(&headers).unwrap().unwrap();
        assert_eq!(engaged.contract, contract);
        assert_eq!(engaged.auditor_addr, "10.0.0.5:7400");
    }

    #[test]
    fn bootstrap_without_headers_disengages() {
        let headers = vec![("Content-Type".to_string(), "video/mp4".to_string())];
        assert_eq!(bootstrap_client(&headers).unwrap(), None);
    }

    #[test]
    fn bootstrap_with_contract_header_alone_disengages() {
        let contract = fixture_contract();
        let mut headers = bootstrap_response_headers(&contract, "10.0.0.5:7400");
        headers.retain(|(k, _)| k != HDR_AUDITOR);
        assert_eq!(bootstrap_client(&headers).unwrap(), None);
    }

    #[test]
    fn bootstrap_with_invalid_contract_is_an_error() {
        use base64::Engine as _;
        let b64 = base64::engine::general_purpose::STANDARD
            .encode(r#"{"window":0,"resolution":[[["720p",1]]],"rebuffering":[1]}"#);
        let headers = vec![
            (HDR_CONTRACT.to_string(), b64),
            (HDR_AUDITOR.to_string(), "10.0.0.5:7400".to_string()),
        ];
        let err = bootstrap_client(&headers).unwrap_err();
        assert!(matches!(err, WireError::InvalidContract(_)));
    }

    #[test]
    fn propose_header_is_detected() {
        let mut headers = vec![("Accept".to_string(), "*/*".to_string())];
        assert!(!request_proposes(&headers));
        headers.push(propose_header());
        assert!(request_proposes(&headers));
    }

    prop_compose! {
        fn arb_label()(idx in 0usize..5) -> String {
            ["240p", "360p", "480p", "720p", "1080p"][idx].to_string()
        }
    }

    prop_compose! {
        fn arb_changes()(v in prop::collection::vec((0.0f64..1e4, 0usize..5), 0..24)) -> Vec<(f64, String)> {
            v.into_iter()
                .map(|(pts, idx)| (pts, ["240p", "360p", "480p", "720p", "1080p"][idx].to_string()))
                .collect()
        }
    }

    fn arb_event() -> impl Strategy<Value = ClientEvent> {
        prop_oneof![
            (0.0f64..1e4, prop::option::of(0.0f64..60.0))
                .prop_map(|(pts, duration_s)| ClientEvent::Rebuffering { pts, duration_s }),
            (0.0f64..1e4, arb_label()).prop_map(|(pts, resolution)| {
                ClientEvent::ResolutionChange { pts, resolution }
            }),
            (any::<u64>(), 0usize..4, 0.0f64..1e4, arb_changes()).prop_map(
                |(window_index, level, through_pts, changes)| ClientEvent::ContractViolation {
                    window_index,
                    level,
                    through_pts,
                    changes,
                }
            ),
            (
                any::<u64>(),
                0.0f64..1e4,
                0.0f64..1e4,
                prop::option::of(0usize..4),
                any::<bool>(),
                prop::collection::vec((arb_label(), 0.0f64..120.0), 0..5),
                any::<u32>(),
                any::<bool>(),
            )
                .prop_map(
                    |(
                        window_index,
                        start_pts,
                        end_pts,
                        final_level,
                        exhausted,
                        played_s,
                        rebuffer_count,
                        is_final,
                    )| ClientEvent::WindowEnd {
                        window_index,
                        start_pts,
                        end_pts,
                        final_level,
                        exhausted,
                        played_s,
                        rebuffer_count,
                        is_final,
                    }
                ),
        ]
    }

    fn arb_query() -> impl Strategy<Value = MonitorQuery> {
        prop_oneof![
            (0.0f64..1e4, prop::option::of(0.0f64..60.0)).prop_map(|(pts, claimed_duration_s)| {
                MonitorQuery::ConfirmRebuffering {
                    pts,
                    claimed_duration_s,
                }
            }),
            (0.0f64..1e4, arb_label()).prop_map(|(pts, resolution)| {
                MonitorQuery::ConfirmResolutionChange { pts, resolution }
            }),
            (any::<u64>(), 0.0f64..1e4, 0.0f64..1e4, arb_changes()).prop_map(
                |(window_index, window_start_pts, through_pts, changes)| {
                    MonitorQuery::ConfirmViolation {
                        window_index,
                        window_start_pts,
                        through_pts,
                        changes,
                    }
                }
            ),
        ]
    }

    pub(crate) fn arb_body() -> impl Strategy<Value = Body> {
        prop_oneof![
            (any::<bool>(), "[ -~]{0,64}").prop_map(|(c, text)| Body::Hello {
                role: if c {
                    Role::ClientMonitor
                } else {
                    Role::ServerMonitor
                },
                contract_text: text,
            }),
            arb_event().prop_map(|event| Body::Notify { event }),
            arb_query().prop_map(|query| Body::Query { query }),
            (arb_query(), prop::option::of(0.0f64..60.0), 0usize..3).prop_map(
                |(query, bound, kind)| Body::Verdict {
                    verdict: match kind {
                        0 => Verdict::Confirm {
                            upper_bound_s: bound,
                        },
                        1 => Verdict::Dispute {
                            reason: "records disagree".into(),
                        },
                        _ => Verdict::Deferred,
                    },
                    query,
                }
            ),
            (
                any::<u64>(),
                any::<u64>(),
                prop::option::of(0usize..4),
                0.0f64..1e4,
                0usize..5
            )
                .prop_map(|(event_seq, window_index, to_level, pts, kind)| {
                    Body::Sync {
                        action: match kind {
                            0 => SyncAction::Proceed { event_seq },
                            1 => SyncAction::Downgraded {
                                event_seq,
                                window_index,
                                to_level,
                            },
                            2 => SyncAction::WindowRolled {
                                event_seq,
                                window_index,
                                next_start_pts: pts,
                            },
                            3 => SyncAction::ResetApplied { new_start_pts: pts },
                            _ => SyncAction::Closed,
                        },
                    }
                }),
            (0usize..5, "[ -~]{0,32}").prop_map(|(kind, detail)| Body::Terminate {
                reason: match kind {
                    0 => TerminateReason::Dispute {
                        event_kind: "rebuffering".into(),
                        detail,
                    },
                    1 => TerminateReason::Timeout {
                        event_kind: "resolution_change".into(),
                    },
                    2 => TerminateReason::ProtocolError { detail },
                    3 => TerminateReason::OneSidedReset {
                        origin: Role::ClientMonitor,
                    },
                    _ => TerminateReason::Misbehavior { detail },
                },
            }),
            (any::<bool>(), 0.0f64..1e4).prop_map(|(c, pts)| Body::Reset {
                origin: if c {
                    Role::ClientMonitor
                } else {
                    Role::ServerMonitor
                },
                new_start_pts: pts,
            }),
            (1usize..64, 0.0f64..1e9, 0.0f64..1e9).prop_map(|(w, a, b)| Body::Misbehavior {
                report: MisbehaviorReport {
                    window_chunks: w,
                    ack_throughput_bps: a,
                    consumed_bitrate_bps: b,
                    ratio: if a > 0.0 { b / a } else { 0.0 },
                    detail: "delayed acknowledgments without bitrate adaptation".into(),
                },
            }),
        ]
    }

    proptest! {
        #[test]
        fn every_message_round_trips(
            body in arb_body(),
            session in "[a-z0-9]{1,12}",
            seq in any::<u64>(),
        ) {
            let msg = WireMessage::new(session, seq, body);
            let frame = encode(&msg).unwrap();
            let (decoded, consumed) = decode(&frame).unwrap();
            prop_assert_eq!(consumed, frame.len());
            prop_assert_eq!(decoded, msg);
        }
    }
}
