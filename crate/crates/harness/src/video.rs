//! The emulated video channel.
//!
//! The streaming session is modeled as one ordered connection carrying an
//! HTTP-like exchange: one request with headers, one response with headers,
//! then server-pushed chunk units (a small header followed by the dummy
//! payload) answered by client acknowledgments. An explicit end-of-stream
//! marker lets the client distinguish a finished stream from a dead
//! connection. Every unit is deterministic given the trace, which is what
//! makes partial-deployment byte comparisons meaningful.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VideoCodecError {
    #[error("malformed video unit: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "t", rename_all = "snake_case")]
pub enum VideoFrame {
    Request {
        path: String,
        headers: Vec<(String, String)>,
    },
    Response {
        status: u16,
        headers: Vec<(String, String)>,
    },
    Chunk {
        chunk_id: u64,
        byte_range: (u64, u64),
        resolution: String,
        pts: f64,
        length_s: f64,
        body_len: u64,
    },
    Ack {
        chunk_id: u64,
    },
    /// No further chunks will follow; the stream finished cleanly.
    End,
}

/// Encodes one unit: `[u32 header_len][header JSON][body]`.
pub fn encode_unit(frame: &VideoFrame, body: &[u8]) -> Vec<u8> {
    let header = serde_json::to_vec(frame).expect("video frames serialize");
    let mut out = Vec::with_capacity(4 + header.len() + body.len());
    out.extend_from_slice(&(header.len() as u32).to_be_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(body);
    out
}

/// Splits one unit back into its frame and body.
pub fn decode_unit(bytes: &[u8]) -> Result<(VideoFrame, &[u8]), VideoCodecError> {
    if bytes.len() < 4 {
        return Err(VideoCodecError::Malformed("truncated header length".into()));
    }
    let header_len = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 4 + header_len {
        return Err(VideoCodecError::Malformed("truncated header".into()));
    }
    let frame: VideoFrame = serde_json::from_slice(&bytes[4..4 + header_len])
        .map_err(|e| VideoCodecError::Malformed(e.to_string()))?;
    Ok((frame, &bytes[4 + header_len..]))
}

/// Deterministic dummy payload for a chunk.
pub fn dummy_body(chunk_id: u64, len: usize) -> Vec<u8> {
    vec![(chunk_id % 251) as u8; len]
}
