//! Shared binary layout for recording containers and checkpoints:
//!
//! ```text
//! magic (8 bytes) | header length (u32 LE) | JSON header | f32 LE payload
//! ```
//!
//! The header wraps the caller's metadata with a format version, the payload
//! size in bytes and its SHA-256 digest.

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::FormatError;

#[derive(Serialize, Deserialize)]
struct Envelope<M> {
    version: u32,
    payload_bytes: usize,
    payload_sha256: String,
    meta: M,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode<M: Serialize>(magic: &[u8; 8], version: u32, meta: &M, payload: &[f32]) -> Vec<u8> {
    let mut body = Vec::with_capacity(payload.len() * 4);
    for v in payload {
        body.extend_from_slice(&v.to_le_bytes());
    }
    let envelope = Envelope {
        version,
        payload_bytes: body.len(),
        payload_sha256: sha256_hex(&body),
        meta,
    };
    let header = serde_json::to_vec(&envelope).expect("metadata serialises");
    let mut out = Vec::with_capacity(12 + header.len() + body.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&body);
    out
}

/// Reads the raw header metadata without deserialising it into a type.
pub fn decode_value(magic: &[u8; 8], version: u32, bytes: &[u8]) -> Result<(serde_json::Value, Vec<f32>), FormatError> {
    decode::<serde_json::Value>(magic, version, bytes)
}

pub fn decode<M: DeserializeOwned>(magic: &[u8; 8], version: u32, bytes: &[u8]) -> Result<(M, Vec<f32>), FormatError> {
    if bytes.len() < 12 || &bytes[..8] != magic {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header = bytes
        .get(12..12 + header_len)
        .ok_or_else(|| FormatError::CorruptHeader("header extends past end of file".into()))?;
    let envelope: Envelope<serde_json::Value> =
        serde_json::from_slice(header).map_err(|e| FormatError::CorruptHeader(e.to_string()))?;
    if envelope.version != version {
        return Err(FormatError::VersionMismatch {
            expected: version,
            found: envelope.version,
        });
    }
    let body = &bytes[12 + header_len..];
    if body.len() != envelope.payload_bytes || !body.len().is_multiple_of(4) {
        return Err(FormatError::TruncatedPayload {
            expected: envelope.payload_bytes,
            actual: body.len(),
        });
    }
    let digest = sha256_hex(body);
    if digest != envelope.payload_sha256 {
        return Err(FormatError::ChecksumMismatch {
            expected: envelope.payload_sha256,
            actual: digest,
        });
    }
    let meta: M = serde_json::from_value(envelope.meta).map_err(|e| FormatError::CorruptHeader(e.to_string()))?;
    let payload = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((meta, payload))
}
