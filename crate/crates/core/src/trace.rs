//! Trace reconstruction: index anchored payloads, walk each product's
//! prev-linked record chain, and attach a verdict for every check.
//!
//! The ledger is authoritative for *what* was anchored and *when*; the store
//! supplies the files. A file whose bytes no longer hash to its anchor is
//! still placed in its product's chain (when it can be attributed) so the
//! report shows the failed `hash_anchored` verdict instead of silently
//! dropping the state.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::codec::{classify_payload, TxCode};
use crate::digest::{hash_record, sha256, Digest32};
use crate::exec::Exec;
use crate::identity::{IdentityId, KeyResolver};
use crate::ledger::{LedgerBackend, LedgerError};
use crate::record::{
    check_conformance, parse_record, parse_record_lossy, scan_leaf, ProductId, RecordKind, TraceRecord,
};
use crate::store::{BlobStore, StoreError};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("no verified init record for product {0}")]
    NoInitRecord(ProductId),
    #[error("product {product} has {} verified init records", digests.len())]
    MultipleInitRecords {
        product: ProductId,
        digests: Vec<Digest32>,
    },
    #[error("digest {0} is not anchored on the ledger")]
    UnknownDigest(Digest32),
    #[error("chain broken: record {missing} is missing")]
    BrokenChain { missing: Digest32 },
    #[error("ledger unavailable: {0}")]
    LedgerUnavailable(#[from] LedgerError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// What the store holds for an anchored digest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "status", content = "detail", rename_all = "snake_case")]
pub enum BlobState {
    /// Bytes hash to the anchor and parse as a canonical record.
    Intact,
    /// Bytes hash to the anchor but are not a valid record.
    Unparseable(String),
    /// Bytes no longer hash to the anchor.
    Corrupt,
    Missing,
}

impl BlobState {
    fn hash_matches(&self) -> bool {
        matches!(self, BlobState::Intact | BlobState::Unparseable(_))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct IndexEntry {
    pub digest: Digest32,
    pub txid: Digest32,
    pub height: u64,
    pub position: usize,
    pub code: TxCode,
    pub confirmations: u64,
    pub verified: bool,
    pub blob: BlobState,
    /// Strictly parsed for intact blobs, best-effort for corrupt ones.
    pub record: Option<TraceRecord>,
    pub product: Option<ProductId>,
    pub prev: Option<Digest32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "anomaly", rename_all = "snake_case")]
pub enum Anomaly {
    Fork { at: Digest32, branches: Vec<Digest32> },
    MissingBlob { digest: Digest32 },
    CorruptBlob { digest: Digest32 },
    UnparseableBlob { digest: Digest32, error: String },
    UnattributedDigest { digest: Digest32 },
    DuplicateAnchor { digest: Digest32, txid: Digest32, height: u64 },
    UnreachableRecord { digest: Digest32 },
    UnauthorizedSigner { digest: Digest32, signer: IdentityId },
    UnverifiedTx { digest: Digest32, txid: Digest32, confirmations: u64 },
    InvalidRevocation { digest: Digest32, target: Digest32 },
}

impl Anomaly {
    fn digest(&self) -> &Digest32 {
        match self {
            Anomaly::Fork { at, .. } => at,
            Anomaly::MissingBlob { digest }
            | Anomaly::CorruptBlob { digest }
            | Anomaly::UnparseableBlob { digest, .. }
            | Anomaly::UnattributedDigest { digest }
            | Anomaly::DuplicateAnchor { digest, .. }
            | Anomaly::UnreachableRecord { digest }
            | Anomaly::UnauthorizedSigner { digest, .. }
            | Anomaly::UnverifiedTx { digest, .. }
            | Anomaly::InvalidRevocation { digest, .. } => digest,
        }
    }
}

impl std::fmt::Display for Anomaly {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Anomaly::Fork { at, branches } => {
                let list: Vec<String> = branches.iter().map(|b| b.short()).collect();
                write!(f, "fork after {}: branches {}", at.short(), list.join(", "))
            }
            Anomaly::MissingBlob { digest } => write!(f, "record {} missing from store", digest.short()),
            Anomaly::CorruptBlob { digest } => {
                write!(f, "stored file for {} does not match its anchored hash", digest.short())
            }
            Anomaly::UnparseableBlob { digest, error } => {
                write!(f, "anchored file {} is not a valid record: {error}", digest.short())
            }
            Anomaly::UnattributedDigest { digest } => {
                write!(f, "anchored digest {} cannot be attributed to a product", digest.short())
            }
            Anomaly::DuplicateAnchor { digest, height, .. } => {
                write!(f, "digest {} anchored again at height {height}", digest.short())
            }
            Anomaly::UnreachableRecord { digest } => {
                write!(f, "record {} is not linked into the chain", digest.short())
            }
            Anomaly::UnauthorizedSigner { digest, signer } => {
                write!(f, "record {} signed by unauthorized {}", digest.short(), signer.digest().short())
            }
            Anomaly::UnverifiedTx { digest, confirmations, .. } => {
                write!(f, "record {} has only {confirmations} confirmation(s)", digest.short())
            }
            Anomaly::InvalidRevocation { digest, target } => {
                write!(f, "revocation {} names {} which is not an earlier update", digest.short(), target.short())
            }
        }
    }
}

/// Which transactions the index admits into `by_digest`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Visibility {
    /// Only transactions with at least `confirmation_depth` confirmations.
    Verified,
    /// Everything the writer can see, including the mempool. Used to find
    /// the current tip when extending a chain.
    Writer,
}

#[derive(Clone, Debug, Serialize)]
pub struct ChainIndex {
    pub tip_height: u64,
    pub confirmation_depth: u64,
    pub by_digest: BTreeMap<Digest32, IndexEntry>,
    /// Anchors below confirmation depth, for standalone file verification.
    pub pending: BTreeMap<Digest32, IndexEntry>,
    /// Digests per product in ledger order.
    pub by_product: BTreeMap<ProductId, Vec<Digest32>>,
    pub anomalies: Vec<Anomaly>,
    #[serde(skip)]
    exec: Exec,
}

struct Loaded {
    blob: BlobState,
    record: Option<TraceRecord>,
    product_hint: Option<ProductId>,
    prev: Option<Digest32>,
}

fn load_blob(store: &BlobStore, digest: &Digest32) -> Loaded {
    let bytes = match store.get_unverified(digest) {
        Ok(bytes) => bytes,
        Err(StoreError::NotFound(_)) => {
            return Loaded {
                blob: BlobState::Missing,
                record: None,
                product_hint: None,
                prev: None,
            }
        }
        Err(e) => {
            return Loaded {
                blob: BlobState::Unparseable(e.to_string()),
                record: None,
                product_hint: None,
                prev: None,
            }
        }
    };
    if sha256(&bytes) == *digest {
        return match parse_record(&bytes) {
            Ok(record) => Loaded {
                blob: BlobState::Intact,
                product_hint: Some(record.product.clone()),
                prev: record.prev,
                record: Some(record),
            },
            Err(e) => Loaded {
                blob: BlobState::Unparseable(e.to_string()),
                record: None,
                product_hint: None,
                prev: None,
            },
        };
    }
    let lossy = parse_record_lossy(&bytes);
    let prev = lossy
        .as_ref()
        .and_then(|r| r.prev)
        .or_else(|| scan_leaf(&bytes, "prev").and_then(|h| Digest32::from_hex(&h).ok()));
    let product_hint = lossy
        .as_ref()
        .map(|r| r.product.clone())
        .or_else(|| scan_leaf(&bytes, "product").and_then(|p| ProductId::new(p).ok()));
    Loaded {
        blob: BlobState::Corrupt,
        record: lossy,
        product_hint,
        prev,
    }
}

impl ChainIndex {
    pub fn entry(&self, digest: &Digest32) -> Option<&IndexEntry> {
        self.by_digest.get(digest)
    }

    pub fn products(&self) -> impl Iterator<Item = &ProductId> {
        self.by_product.keys()
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }
}

/// Index of every verified trace anchor on the ledger.
pub fn build_index<L: LedgerBackend + ?Sized>(ledger: &L, store: &BlobStore) -> Result<ChainIndex, TraceError> {
    build_index_with(ledger, store, Visibility::Verified, Exec::default())
}

pub fn build_index_with<L: LedgerBackend + ?Sized>(
    ledger: &L,
    store: &BlobStore,
    visibility: Visibility,
    exec: Exec,
) -> Result<ChainIndex, TraceError> {
    let tip = ledger.tip_height();
    let depth = ledger.config().confirmation_depth;

    struct Anchor {
        digest: Digest32,
        txid: Digest32,
        height: u64,
        position: usize,
        code: TxCode,
        confirmations: u64,
    }

    let mut anchors: Vec<Anchor> = ledger
        .scan(0, tip)?
        .into_iter()
        .map(|e| Anchor {
            digest: e.payload.digest,
            txid: e.txid,
            height: e.height,
            position: e.position,
            code: e.payload.code,
            confirmations: tip - e.height + 1,
        })
        .collect();
    if visibility == Visibility::Writer {
        for (position, (txid, payload)) in ledger.mempool_payloads().into_iter().enumerate() {
            if let Some(p) = classify_payload(&payload) {
                anchors.push(Anchor {
                    digest: p.digest,
                    txid,
                    height: tip + 1,
                    position,
                    code: p.code,
                    confirmations: 0,
                });
            }
        }
    }

    let mut anomalies = Vec::new();
    let mut seen = BTreeSet::new();
    let mut unique = Vec::new();
    for a in anchors {
        if seen.insert(a.digest) {
            unique.push(a);
        } else {
            anomalies.push(Anomaly::DuplicateAnchor {
                digest: a.digest,
                txid: a.txid,
                height: a.height,
            });
        }
    }

    let loaded = exec.map(&unique, |a| load_blob(store, &a.digest));

    let mut hints = Vec::with_capacity(unique.len());
    let mut entries: Vec<IndexEntry> = Vec::with_capacity(unique.len());
    for (a, l) in unique.into_iter().zip(loaded) {
        let product = match l.blob {
            BlobState::Intact => l.product_hint.clone(),
            _ => None,
        };
        hints.push(match l.blob {
            BlobState::Corrupt => l.product_hint,
            _ => None,
        });
        entries.push(IndexEntry {
            digest: a.digest,
            txid: a.txid,
            height: a.height,
            position: a.position,
            code: a.code,
            confirmations: a.confirmations,
            verified: a.confirmations >= depth,
            blob: l.blob,
            record: l.record,
            product,
            prev: l.prev,
        });
    }
    attribute_damaged(&mut entries, &hints);

    for e in &entries {
        match &e.blob {
            BlobState::Intact => {}
            BlobState::Missing => anomalies.push(Anomaly::MissingBlob { digest: e.digest }),
            BlobState::Corrupt => anomalies.push(Anomaly::CorruptBlob { digest: e.digest }),
            BlobState::Unparseable(error) => anomalies.push(Anomaly::UnparseableBlob {
                digest: e.digest,
                error: error.clone(),
            }),
        }
        if e.product.is_none() {
            anomalies.push(Anomaly::UnattributedDigest { digest: e.digest });
        }
    }

    let mut by_digest = BTreeMap::new();
    let mut pending = BTreeMap::new();
    let mut by_product: BTreeMap<ProductId, Vec<Digest32>> = BTreeMap::new();
    for e in entries {
        let admitted = e.verified || visibility == Visibility::Writer;
        if admitted {
            if let Some(p) = &e.product {
                by_product.entry(p.clone()).or_default().push(e.digest);
            }
        }
        if !e.verified {
            pending.insert(e.digest, e.clone());
        }
        if admitted {
            by_digest.insert(e.digest, e);
        }
    }

    Ok(ChainIndex {
        tip_height: tip,
        confirmation_depth: depth,
        by_digest,
        pending,
        by_product,
        anomalies,
        exec,
    })
}

/// Assigns products to entries whose file is missing or damaged: first
/// from intact successors that name them as prev, then from a recovered
/// prev link, then from whatever product the damaged file still shows.
fn attribute_damaged(entries: &mut [IndexEntry], file_hints: &[Option<ProductId>]) {
    let by_digest: HashMap<Digest32, usize> =
        entries.iter().enumerate().map(|(i, e)| (e.digest, i)).collect();
    loop {
        let mut changed = false;
        for i in 0..entries.len() {
            if entries[i].product.is_some() {
                continue;
            }
            let digest = entries[i].digest;
            let from_successor = entries
                .iter()
                .find(|s| s.prev == Some(digest) && s.product.is_some() && s.blob == BlobState::Intact)
                .and_then(|s| s.product.clone());
            let from_prev = entries[i]
                .prev
                .and_then(|p| by_digest.get(&p))
                .and_then(|&j| entries[j].product.clone());
            if let Some(p) = from_successor.or(from_prev) {
                entries[i].product = Some(p);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    for (e, hint) in entries.iter_mut().zip(file_hints) {
        if e.product.is_none() && e.blob == BlobState::Corrupt {
            e.product = hint.clone();
        }
    }
}

/// Pass/fail for every check applied to one chained record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Verdicts {
    pub hash_anchored: bool,
    pub code_matches_kind: bool,
    pub signature_valid: bool,
    pub signer_authorized: bool,
    pub spec_conformant: bool,
    pub timestamp_monotone: bool,
}

impl Verdicts {
    pub fn all_pass(&self) -> bool {
        self.failed().is_empty()
    }

    pub fn failed(&self) -> Vec<&'static str> {
        [
            ("hash_anchored", self.hash_anchored),
            ("code_matches_kind", self.code_matches_kind),
            ("signature_valid", self.signature_valid),
            ("signer_authorized", self.signer_authorized),
            ("spec_conformant", self.spec_conformant),
            ("timestamp_monotone", self.timestamp_monotone),
        ]
        .into_iter()
        .filter(|(_, ok)| !ok)
        .map(|(name, _)| name)
        .collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifiedState {
    pub digest: Digest32,
    pub txid: Digest32,
    pub height: u64,
    pub code: TxCode,
    /// Absent when the stored file could not be read as a record.
    pub record: Option<TraceRecord>,
    pub verdicts: Verdicts,
    pub revoked: bool,
    pub revoked_by: Option<Digest32>,
}

impl VerifiedState {
    pub fn kind(&self) -> Option<RecordKind> {
        self.record.as_ref().map(TraceRecord::kind)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TraceReport {
    pub product: ProductId,
    /// Ledger height the report was built against.
    pub tip_height: u64,
    pub init: VerifiedState,
    pub states: Vec<VerifiedState>,
    pub anomalies: Vec<Anomaly>,
}

impl TraceReport {
    /// No anomalies and every verdict passes.
    pub fn is_clean(&self) -> bool {
        self.anomalies.is_empty()
            && self.init.verdicts.all_pass()
            && self.states.iter().all(|s| s.verdicts.all_pass())
    }

    pub fn chain(&self) -> impl Iterator<Item = &VerifiedState> {
        std::iter::once(&self.init).chain(self.states.iter())
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "product {} (ledger tip {})", self.product, self.tip_height);
        let _ = writeln!(
            out,
            "{:<3} {:<4} {:<14} {:>6}  {:<20}  {:<4} {:<4} {:<4} {:<4} {:<4} {:<4}  notes",
            "#", "code", "digest", "height", "timestamp", "hash", "code", "sig", "auth", "spec", "time"
        );
        let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
        for (i, s) in self.chain().enumerate() {
            let ts = s
                .record
                .as_ref()
                .map(|r| r.timestamp.to_string())
                .unwrap_or_else(|| "-".into());
            let mut notes = Vec::new();
            if let Some(by) = &s.revoked_by {
                notes.push(format!("revoked by {}", by.short()));
            }
            match s.record.as_ref().map(|r| &r.body) {
                Some(crate::record::RecordBody::Update { state }) => {
                    let kv: Vec<String> = state.iter().map(|(k, v)| format!("{k}={v}")).collect();
                    notes.push(kv.join(" "));
                }
                Some(crate::record::RecordBody::Revoke { revokes, reason }) => {
                    notes.push(format!("revokes {}", revokes.short()));
                    if let Some(r) = reason {
                        notes.push(format!("({r})"));
                    }
                }
                Some(crate::record::RecordBody::Init { schema }) => {
                    let names: Vec<String> = schema
                        .fields()
                        .iter()
                        .map(|f| if f.required { f.name.clone() } else { format!("[{}]", f.name) })
                        .collect();
                    notes.push(format!("fields {}", names.join(",")));
                }
                None => notes.push("unreadable record".into()),
            }
            let v = &s.verdicts;
            let _ = writeln!(
                out,
                "{:<3} {:<4} {:<14} {:>6}  {:<20}  {:<4} {:<4} {:<4} {:<4} {:<4} {:<4}  {}",
                i,
                s.code.to_string(),
                s.digest.short(),
                s.height,
                ts,
                mark(v.hash_anchored),
                mark(v.code_matches_kind),
                mark(v.signature_valid),
                mark(v.signer_authorized),
                mark(v.spec_conformant),
                mark(v.timestamp_monotone),
                notes.join(" ")
            );
        }
        if self.anomalies.is_empty() {
            let _ = writeln!(out, "anomalies: none");
        } else {
            let _ = writeln!(out, "anomalies:");
            for a in &self.anomalies {
                let _ = writeln!(out, "  - {a}");
            }
        }
        let _ = writeln!(out, "result: {}", if self.is_clean() { "VERIFIED" } else { "FAILED" });
        out
    }
}

/// Verdicts for an origin-first path, plus revocations applied within it.
fn verify_path<K: KeyResolver + Sync + ?Sized>(
    path: &[&IndexEntry],
    keys: &K,
    exec: Exec,
) -> (Vec<VerifiedState>, Vec<Anomaly>) {
    let init = path.first().and_then(|e| e.record.as_ref());
    let indices: Vec<usize> = (0..path.len()).collect();
    let verdicts = exec.map(&indices, |&i| {
        let entry = path[i];
        let hash_anchored = entry.blob.hash_matches() && entry.verified;
        let Some(record) = entry.record.as_ref() else {
            return Verdicts {
                hash_anchored,
                code_matches_kind: false,
                signature_valid: false,
                signer_authorized: false,
                spec_conformant: false,
                timestamp_monotone: false,
            };
        };
        let signature_valid = keys
            .resolve(&record.signer)
            .is_some_and(|pk| record.verify_signature(&pk));
        let signer_authorized = init.is_some_and(|init| init.signer == record.signer);
        let spec_conformant = match record.kind() {
            RecordKind::Update => init.is_some_and(|init| {
                check_conformance(record, init).is_ok_and(|violations| violations.is_empty())
            }),
            _ => true,
        };
        // Damaged predecessors are skipped: their timestamps cannot be trusted
        // and their failure is already reported on their own row.
        let timestamp_monotone = path[..i]
            .iter()
            .rev()
            .find_map(|e| e.record.as_ref().filter(|_| e.blob.hash_matches()))
            .is_none_or(|p| p.timestamp <= record.timestamp);
        Verdicts {
            hash_anchored,
            code_matches_kind: entry.code.matches(record.kind()),
            signature_valid,
            signer_authorized,
            spec_conformant,
            timestamp_monotone,
        }
    });

    let mut states: Vec<VerifiedState> = path
        .iter()
        .zip(verdicts)
        .map(|(e, verdicts)| VerifiedState {
            digest: e.digest,
            txid: e.txid,
            height: e.height,
            code: e.code,
            record: e.record.clone(),
            verdicts,
            revoked: false,
            revoked_by: None,
        })
        .collect();

    let mut anomalies = Vec::new();
    for j in 0..states.len() {
        let Some(target) = states[j].record.as_ref().and_then(|r| r.revokes().copied()) else {
            continue;
        };
        if !states[j].verdicts.all_pass() {
            continue;
        }
        let revoker = states[j].digest;
        let hit = states[..j]
            .iter()
            .position(|s| s.digest == target && s.kind() == Some(RecordKind::Update));
        match hit {
            Some(k) if !states[k].revoked => {
                states[k].revoked = true;
                states[k].revoked_by = Some(revoker);
            }
            Some(_) => {}
            None => anomalies.push(Anomaly::InvalidRevocation {
                digest: revoker,
                target,
            }),
        }
    }
    for s in &states {
        if !s.verdicts.signer_authorized {
            if let Some(r) = &s.record {
                anomalies.push(Anomaly::UnauthorizedSigner {
                    digest: s.digest,
                    signer: r.signer,
                });
            }
        }
    }
    (states, anomalies)
}

/// Reconstructs and verifies one product's lifecycle, init first.
pub fn resolve_chain<K: KeyResolver + Sync + ?Sized>(
    product: &ProductId,
    index: &ChainIndex,
    keys: &K,
) -> Result<TraceReport, TraceError> {
    let digests = index.by_product.get(product).map(Vec::as_slice).unwrap_or(&[]);
    let entries: Vec<&IndexEntry> = digests.iter().filter_map(|d| index.by_digest.get(d)).collect();
    let inits: Vec<&IndexEntry> = entries.iter().copied().filter(|e| e.code == TxCode::IT).collect();
    let init = match inits.as_slice() {
        [] => return Err(TraceError::NoInitRecord(product.clone())),
        [one] => *one,
        many => {
            return Err(TraceError::MultipleInitRecords {
                product: product.clone(),
                digests: many.iter().map(|e| e.digest).collect(),
            })
        }
    };

    let mut successors: BTreeMap<Digest32, Vec<&IndexEntry>> = BTreeMap::new();
    for e in &entries {
        if e.digest == init.digest {
            continue;
        }
        if let Some(prev) = e.prev {
            successors.entry(prev).or_default().push(e);
        }
    }

    let mut anomalies = Vec::new();
    let mut path = vec![init];
    let mut visited = BTreeSet::from([init.digest]);
    let mut cursor = init.digest;
    // Corrupt records whose prev link is lost or names no record of this
    // product, in ledger order.
    let known: BTreeSet<Digest32> = entries.iter().map(|e| e.digest).collect();
    let mut orphans = entries.iter().copied().filter(|e| {
        e.blob == BlobState::Corrupt && e.code != TxCode::IT && !e.prev.is_some_and(|p| known.contains(&p))
    });
    loop {
        let Some(next) = successors.get(&cursor) else {
            match orphans.find(|e| !visited.contains(&e.digest)) {
                Some(orphan) => {
                    visited.insert(orphan.digest);
                    path.push(orphan);
                    cursor = orphan.digest;
                    continue;
                }
                None => break,
            }
        };
        match next.as_slice() {
            [one] if visited.insert(one.digest) => {
                path.push(one);
                cursor = one.digest;
            }
            [_] => break,
            many => {
                anomalies.push(Anomaly::Fork {
                    at: cursor,
                    branches: many.iter().map(|e| e.digest).collect(),
                });
                break;
            }
        }
    }
    for e in &entries {
        if !visited.contains(&e.digest) {
            anomalies.push(Anomaly::UnreachableRecord { digest: e.digest });
        }
    }

    let (mut chain, path_anomalies) = verify_path(&path, keys, index.exec);
    anomalies.extend(path_anomalies);

    for e in index.pending.values() {
        if e.product.as_ref() == Some(product) {
            anomalies.push(Anomaly::UnverifiedTx {
                digest: e.digest,
                txid: e.txid,
                confirmations: e.confirmations,
            });
        }
    }
    let ours: BTreeSet<Digest32> = entries.iter().map(|e| e.digest).collect();
    for a in &index.anomalies {
        let relevant = matches!(
            a,
            Anomaly::MissingBlob { .. }
                | Anomaly::CorruptBlob { .. }
                | Anomaly::UnparseableBlob { .. }
                | Anomaly::DuplicateAnchor { .. }
        );
        if relevant && ours.contains(a.digest()) {
            anomalies.push(a.clone());
        }
    }

    let states = chain.split_off(1);
    let init = chain.pop().expect("path starts with init");
    Ok(TraceReport {
        product: product.clone(),
        tip_height: index.tip_height,
        init,
        states,
        anomalies,
    })
}

/// The prev-chain from `state_digest` back to its init record, origin first.
pub fn backward_trace<K: KeyResolver + Sync + ?Sized>(
    state_digest: &Digest32,
    index: &ChainIndex,
    keys: &K,
) -> Result<Vec<VerifiedState>, TraceError> {
    let mut entry = index
        .by_digest
        .get(state_digest)
        .ok_or(TraceError::UnknownDigest(*state_digest))?;
    if entry.blob == BlobState::Missing {
        return Err(TraceError::BrokenChain { missing: entry.digest });
    }
    let mut path = vec![entry];
    let mut visited = BTreeSet::from([entry.digest]);
    while entry.code != TxCode::IT {
        let prev = entry.prev.ok_or(TraceError::BrokenChain { missing: entry.digest })?;
        let prev_entry = index
            .by_digest
            .get(&prev)
            .filter(|e| e.blob != BlobState::Missing)
            .ok_or(TraceError::BrokenChain { missing: prev })?;
        if !visited.insert(prev_entry.digest) {
            return Err(TraceError::BrokenChain { missing: prev });
        }
        path.push(prev_entry);
        entry = prev_entry;
    }
    path.reverse();
    Ok(verify_path(&path, keys, index.exec).0)
}

/// Products whose current state matches every `field = value` criterion.
/// The current state is the latest fully verified, non-revoked update, or
/// the init record when there is none.
pub fn forward_trace<K: KeyResolver + Sync + ?Sized>(
    criteria: &BTreeMap<String, String>,
    index: &ChainIndex,
    keys: &K,
) -> Vec<(ProductId, VerifiedState)> {
    let products: Vec<&ProductId> = index.by_product.keys().collect();
    let current = index.exec.map(&products, |p| {
        let report = resolve_chain(p, index, keys).ok()?;
        let latest = report
            .states
            .iter()
            .rev()
            .find(|s| s.kind() == Some(RecordKind::Update) && !s.revoked && s.verdicts.all_pass())
            .cloned()
            .unwrap_or(report.init);
        let matches = criteria.iter().all(|(k, v)| {
            latest
                .record
                .as_ref()
                .and_then(TraceRecord::state)
                .and_then(|s| s.get(k))
                == Some(v)
        });
        matches.then(|| ((*p).clone(), latest))
    });
    current.into_iter().flatten().collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum FileVerdict {
    Anchored { digest: Digest32, txid: Digest32, height: u64, code: TxCode },
    Pending { digest: Digest32, txid: Digest32, height: u64, confirmations: u64 },
    Unanchored { digest: Digest32 },
}

/// Checks a file against the ledger by hash alone.
pub fn verify_file_against_chain(file_bytes: &[u8], index: &ChainIndex) -> FileVerdict {
    let digest = hash_record(file_bytes);
    if let Some(e) = index.by_digest.get(&digest).filter(|e| e.verified) {
        return FileVerdict::Anchored {
            digest,
            txid: e.txid,
            height: e.height,
            code: e.code,
        };
    }
    match index.pending.get(&digest) {
        Some(e) if e.confirmations > 0 => FileVerdict::Pending {
            digest,
            txid: e.txid,
            height: e.height,
            confirmations: e.confirmations,
        },
        _ => FileVerdict::Unanchored { digest },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::encode_payload;
    use crate::identity::{keygen, SecretKey};
    use crate::ledger::{Ledger, LedgerConfig};
    use crate::record::{canonicalize, FieldSpec, Schema, Timestamp};

    struct Fixture {
        _dir: tempfile::TempDir,
        store: BlobStore,
        ledger: Ledger,
        key: SecretKey,
    }

    impl Fixture {
        fn new() -> Self {
            let dir = tempfile::tempdir().unwrap();
            let store = BlobStore::open(dir.path().join("store")).unwrap();
            let ledger = Ledger::new(LedgerConfig::default()).unwrap();
            let (key, _) = keygen().unwrap();
            store.publish_key(&key.public_key()).unwrap();
            Self {
                _dir: dir,
                store,
                ledger,
                key,
            }
        }

        fn anchor(&mut self, record: TraceRecord, key: Option<&SecretKey>) -> Digest32 {
            let signed = record.sign(key.unwrap_or(&self.key)).unwrap();
            let bytes = canonicalize(&signed, true).unwrap();
            let digest = self.store.put(&bytes).unwrap();
            self.ledger
                .submit(&encode_payload(TxCode::for_kind(signed.kind()), &digest))
                .unwrap();
            digest
        }

        fn confirm(&mut self) {
            self.ledger.advance(1800).unwrap();
        }

        fn index(&self) -> ChainIndex {
            build_index(&self.ledger, &self.store).unwrap()
        }
    }

    fn pid() -> ProductId {
        ProductId::new("LOT-1").unwrap()
    }

    fn ts(s: i64) -> Timestamp {
        Timestamp::from_unix(s).unwrap()
    }

    fn state(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    fn init_record(signer: IdentityId) -> TraceRecord {
        let schema = Schema::new(vec![FieldSpec::required("origin"), FieldSpec::required("location")]).unwrap();
        TraceRecord::init(pid(), schema, ts(100), signer)
    }

    #[test]
    fn empty_ledger_empty_index() {
        let f = Fixture::new();
        let idx = f.index();
        assert!(idx.by_digest.is_empty() && idx.by_product.is_empty());
    }

    #[test]
    fn init_only() {
        let mut f = Fixture::new();
        let d = f.anchor(init_record(f.key.id()), None);
        f.confirm();
        let idx = f.index();
        assert_eq!(idx.by_product[&pid()], vec![d]);
        let report = resolve_chain(&pid(), &idx, &f.store).unwrap();
        assert!(report.states.is_empty());
        assert!(report.init.verdicts.all_pass());
        assert!(report.is_clean());
    }

    #[test]
    fn pending_is_excluded() {
        let mut f = Fixture::new();
        let d = f.anchor(init_record(f.key.id()), None);
        f.ledger.advance(600).unwrap();
        let idx = f.index();
        assert!(idx.by_digest.is_empty());
        assert!(idx.pending.contains_key(&d));
    }

    #[test]
    fn lifecycle_with_revocation() {
        let mut f = Fixture::new();
        let id = f.key.id();
        let i = f.anchor(init_record(id), None);
        let u1 = f.anchor(
            TraceRecord::update(pid(), i, state(&[("origin", "GR"), ("location", "farm")]), ts(200), id),
            None,
        );
        let u2 = f.anchor(
            TraceRecord::update(pid(), u1, state(&[("origin", "GR"), ("location", "port")]), ts(300), id),
            None,
        );
        let rt = f.anchor(TraceRecord::revoke(pid(), u2, u1, Some("wrong scan".into()), ts(400), id), None);
        f.confirm();
        let idx = f.index();
        let report = resolve_chain(&pid(), &idx, &f.store).unwrap();
        let digests: Vec<_> = report.states.iter().map(|s| s.digest).collect();
        assert_eq!(digests, vec![u1, u2, rt]);
        assert!(report.states[0].revoked);
        assert_eq!(report.states[0].revoked_by, Some(rt));
        assert!(!report.states[1].revoked);
        assert!(report.is_clean(), "{}", report.render_text());

        let back = backward_trace(&u2, &idx, &f.store).unwrap();
        assert_eq!(back.iter().map(|s| s.digest).collect::<Vec<_>>(), vec![i, u1, u2]);
        let back_init = backward_trace(&i, &idx, &f.store).unwrap();
        assert_eq!(back_init.len(), 1);

        let at_port = forward_trace(&state(&[("location", "port")]), &idx, &f.store);
        assert_eq!(at_port.len(), 1);
        assert_eq!(at_port[0].1.digest, u2);
        let at_farm = forward_trace(&state(&[("location", "farm")]), &idx, &f.store);
        assert!(at_farm.is_empty());
        assert_eq!(forward_trace(&BTreeMap::new(), &idx, &f.store).len(), 1);
    }

    #[test]
    fn foreign_signer_is_flagged() {
        let mut f = Fixture::new();
        let (intruder, _) = keygen().unwrap();
        f.store.publish_key(&intruder.public_key()).unwrap();
        let i = f.anchor(init_record(f.key.id()), None);
        let u = f.anchor(
            TraceRecord::update(pid(), i, state(&[("origin", "X"), ("location", "Y")]), ts(200), intruder.id()),
            Some(&intruder),
        );
        f.confirm();
        let report = resolve_chain(&pid(), &f.index(), &f.store).unwrap();
        assert_eq!(report.states[0].digest, u);
        assert!(!report.states[0].verdicts.signer_authorized);
        assert!(report.states[0].verdicts.signature_valid);
        assert!(report
            .anomalies
            .iter()
            .any(|a| matches!(a, Anomaly::UnauthorizedSigner { .. })));
    }

    #[test]
    fn missing_prev_breaks_backward_trace() {
        let mut f = Fixture::new();
        let id = f.key.id();
        let i = f.anchor(init_record(id), None);
        let u1 = f.anchor(TraceRecord::update(pid(), i, state(&[("origin", "a"), ("location", "b")]), ts(200), id), None);
        let u2 = f.anchor(TraceRecord::update(pid(), u1, state(&[("origin", "a"), ("location", "c")]), ts(300), id), None);
        f.confirm();
        std::fs::remove_file(f.store.path_for(&u1)).unwrap();
        let idx = f.index();
        match backward_trace(&u2, &idx, &f.store) {
            Err(TraceError::BrokenChain { missing }) => assert_eq!(missing, u1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            backward_trace(&sha256(b"nothing"), &idx, &f.store),
            Err(TraceError::UnknownDigest(_))
        ));
    }

    #[test]
    fn file_verdicts() {
        let mut f = Fixture::new();
        let id = f.key.id();
        let signed = init_record(id).sign(&f.key).unwrap();
        let bytes = canonicalize(&signed, true).unwrap();
        f.anchor(init_record(id), None);
        f.ledger.advance(600).unwrap();
        assert!(matches!(
            verify_file_against_chain(&bytes, &f.index()),
            FileVerdict::Pending { confirmations: 1, .. }
        ));
        f.ledger.advance(1200).unwrap();
        let idx = f.index();
        assert!(matches!(
            verify_file_against_chain(&bytes, &idx),
            FileVerdict::Anchored { code: TxCode::IT, .. }
        ));
        let mut flipped = bytes.clone();
        flipped[60] ^= 0x01;
        assert!(matches!(verify_file_against_chain(&flipped, &idx), FileVerdict::Unanchored { .. }));
    }

    #[test]
    fn no_and_multiple_inits() {
        let mut f = Fixture::new();
        assert!(matches!(
            resolve_chain(&pid(), &f.index(), &f.store),
            Err(TraceError::NoInitRecord(_))
        ));
        f.anchor(init_record(f.key.id()), None);
        let mut second = init_record(f.key.id());
        second.timestamp = ts(101);
        f.anchor(second, None);
        f.confirm();
        assert!(matches!(
            resolve_chain(&pid(), &f.index(), &f.store),
            Err(TraceError::MultipleInitRecords { .. })
        ));
    }
}
