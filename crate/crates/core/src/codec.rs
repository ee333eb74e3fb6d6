//! On-chain anchor payloads: a two-letter ASCII code followed by the raw
//! 32-byte record digest.
//!
//! ```text
//! byte  0..2   b"IT" | b"UT" | b"RT"
//! byte  2..34  SHA-256 digest of the signed record file
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{Digest32, DIGEST_LEN};
use crate::record::RecordKind;

pub const CODE_LEN: usize = 2;
pub const PAYLOAD_LEN: usize = CODE_LEN + DIGEST_LEN;
/// Largest metadata payload a single transaction may carry.
pub const MAX_PAYLOAD: usize = 80;

const _: () = assert!(PAYLOAD_LEN <= MAX_PAYLOAD);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("payload must be {PAYLOAD_LEN} bytes, got {0}")]
    BadLength(usize),
    #[error("unknown transaction code {0:02x?}")]
    UnknownCode([u8; CODE_LEN]),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TxCode {
    /// Initialization of a product's record chain.
    IT,
    /// State update.
    UT,
    /// Revocation of an earlier state.
    RT,
}

impl TxCode {
    pub const ALL: [TxCode; 3] = [TxCode::IT, TxCode::UT, TxCode::RT];

    pub fn wire(&self) -> [u8; CODE_LEN] {
        match self {
            TxCode::IT => *b"IT",
            TxCode::UT => *b"UT",
            TxCode::RT => *b"RT",
        }
    }

    pub fn from_wire(bytes: [u8; CODE_LEN]) -> Option<Self> {
        match &bytes {
            b"IT" => Some(TxCode::IT),
            b"UT" => Some(TxCode::UT),
            b"RT" => Some(TxCode::RT),
            _ => None,
        }
    }

    pub fn for_kind(kind: RecordKind) -> Self {
        match kind {
            RecordKind::Init => TxCode::IT,
            RecordKind::Update => TxCode::UT,
            RecordKind::Revoke => TxCode::RT,
        }
    }

    pub fn matches(&self, kind: RecordKind) -> bool {
        *self == Self::for_kind(kind)
    }
}

impl fmt::Display for TxCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(std::str::from_utf8(&self.wire()).expect("ascii"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TxPayload {
    pub code: TxCode,
    pub digest: Digest32,
}

impl TxPayload {
    pub fn to_bytes(&self) -> [u8; PAYLOAD_LEN] {
        encode_payload(self.code, &self.digest)
    }
}

pub fn encode_payload(code: TxCode, digest: &Digest32) -> [u8; PAYLOAD_LEN] {
    let mut out = [0u8; PAYLOAD_LEN];
    out[..CODE_LEN].copy_from_slice(&code.wire());
    out[CODE_LEN..].copy_from_slice(digest.as_bytes());
    out
}

pub fn decode_payload(bytes: &[u8]) -> Result<TxPayload, CodecError> {
    if bytes.len() != PAYLOAD_LEN {
        return Err(CodecError::BadLength(bytes.len()));
    }
    let raw_code = [bytes[0], bytes[1]];
    let code = TxCode::from_wire(raw_code).ok_or(CodecError::UnknownCode(raw_code))?;
    let digest = Digest32::from_slice(&bytes[CODE_LEN..]).expect("length checked");
    Ok(TxPayload { code, digest })
}

/// Total variant of [`decode_payload`] for skimming foreign payloads.
pub fn classify_payload(bytes: &[u8]) -> Option<TxPayload> {
    decode_payload(bytes).ok()
}
