//! Product traceability anchored on an append-only ledger.
//!
//! Lifecycle events are written as signed, deterministic XML records
//! ([`record`]), stored by content hash ([`store`]), and anchored on a
//! simulated chain ([`ledger`]) through 34-byte coded payloads ([`codec`]).
//! [`trace`] rebuilds and verifies a product's history from the chain and
//! the store alone.

pub mod codec;
pub mod digest;
pub mod exec;
pub mod identity;
pub mod ledger;
pub mod record;
pub mod store;
pub mod trace;
mod xml;

pub use codec::{classify_payload, decode_payload, encode_payload, TxCode, TxPayload};
pub use digest::{hash_record, sha256, Digest32};
pub use exec::Exec;
pub use identity::{IdentityId, IdentityProfile, Keystore, PublicKey, SecretKey, Signature};
pub use ledger::{Ledger, LedgerBackend, LedgerConfig, TxStatus};
pub use record::{canonicalize, check_conformance, parse_record, ProductId, RecordKind, TraceRecord};
pub use store::BlobStore;
pub use trace::{build_index, resolve_chain, ChainIndex, TraceReport, VerifiedState};
