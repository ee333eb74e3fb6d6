#![allow(dead_code)]

use std::collections::BTreeMap;

use proptest::prelude::*;
use tracechain_core::codec::encode_payload;
use tracechain_core::identity::{keygen, SecretKey};
use tracechain_core::record::{canonicalize, FieldSpec, Schema, Timestamp};
use tracechain_core::{BlobStore, Digest32, Ledger, LedgerBackend, LedgerConfig, ProductId, TraceRecord, TxCode};

pub struct World {
    pub dir: tempfile::TempDir,
    pub store: BlobStore,
    pub ledger: Ledger,
    pub key: SecretKey,
}

impl World {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::open(dir.path().join("store")).unwrap();
        let ledger = Ledger::new(LedgerConfig::default()).unwrap();
        let (key, _) = keygen().unwrap();
        store.publish_key(&key.public_key()).unwrap();
        Self { dir, store, ledger, key }
    }

    /// Stores a signed record and returns (digest, payload) without submitting.
    pub fn store_signed(&self, record: &TraceRecord) -> (Digest32, Vec<u8>) {
        let bytes = canonicalize(record, true).unwrap();
        let digest = self.store.put(&bytes).unwrap();
        (digest, encode_payload(TxCode::for_kind(record.kind()), &digest).to_vec())
    }

    pub fn anchor(&mut self, record: &TraceRecord) -> Digest32 {
        let (digest, payload) = self.store_signed(record);
        self.ledger.submit(&payload).unwrap();
        digest
    }

    pub fn confirm_all(&mut self) {
        let depth = self.ledger.config().confirmation_depth;
        let interval = self.ledger.config().block_interval;
        self.ledger.advance(depth * interval).unwrap();
    }
}

pub fn ts(s: i64) -> Timestamp {
    Timestamp::from_unix(s).unwrap()
}

pub fn product(s: &str) -> ProductId {
    ProductId::new(s).unwrap()
}

pub fn state(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

/// Signed records of one linear product history: init followed by
/// `updates` updates, all carrying `location` and `batch`.
pub fn linear_history(key: &SecretKey, id: &str, updates: usize) -> Vec<TraceRecord> {
    let p = product(id);
    let schema = Schema::new(vec![FieldSpec::required("location"), FieldSpec::required("batch")]).unwrap();
    let init = TraceRecord::init(p.clone(), schema, ts(1_000), key.id()).sign(key).unwrap();
    let mut out = vec![init];
    for u in 0..updates {
        let prev = tracechain_core::hash_record(&canonicalize(out.last().unwrap(), true).unwrap());
        let s = state(&[("location", &format!("site-{u}")), ("batch", "B1")]);
        out.push(
            TraceRecord::update(p.clone(), prev, s, ts(1_000 + 10 * (u as i64 + 1)), key.id())
                .sign(key)
                .unwrap(),
        );
    }
    out
}

pub fn digest_of(record: &TraceRecord) -> Digest32 {
    tracechain_core::hash_record(&canonicalize(record, true).unwrap())
}

fn name() -> impl Strategy<Value = String> {
    "[A-Za-z0-9._-]{1,12}"
}

fn value() -> impl Strategy<Value = String> {
    prop_oneof![
        "[ -~]{0,24}",
        "[a-zA-Z0-9 &<>\"'éü°€]{0,16}",
    ]
}

fn digest() -> impl Strategy<Value = Digest32> {
    any::<[u8; 32]>().prop_map(Digest32::from_bytes)
}

/// Unsigned records of every kind with valid invariants.
pub fn any_record() -> impl Strategy<Value = TraceRecord> {
    let product = "[A-Za-z0-9._-]{1,64}".prop_map(|s| ProductId::new(s).unwrap());
    let timestamp = (0i64..=253_402_300_799).prop_map(ts);
    let signer = digest().prop_map(tracechain_core::IdentityId::from_digest);
    let init = prop::collection::btree_map(name(), any::<bool>(), 1..6).prop_map(|m| {
        let fields = m
            .into_iter()
            .map(|(name, required)| FieldSpec { name, required })
            .collect();
        Schema::new(fields).unwrap()
    });
    let body = prop_oneof![
        init.prop_map(|schema| (None, tracechain_core::record::RecordBody::Init { schema })),
        (digest(), prop::collection::btree_map(name(), value(), 1..6))
            .prop_map(|(prev, state)| (Some(prev), tracechain_core::record::RecordBody::Update { state })),
        (digest(), digest(), prop::option::of(value())).prop_map(|(prev, revokes, reason)| (
            Some(prev),
            tracechain_core::record::RecordBody::Revoke { revokes, reason }
        )),
    ];
    (product, timestamp, signer, body).prop_map(|(product, timestamp, signer, (prev, body))| TraceRecord {
        product,
        prev,
        timestamp,
        body,
        signer,
        signature: None,
    })
}
