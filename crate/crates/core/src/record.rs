//! Trace records: the init / update / revoke lifecycle events, their
//! deterministic XML form, and conformance against an init record's
//! field list.
//!
//! A serialized record looks like this (update shown):
//!
//! ```text
//! <?xml version="1.0" encoding="UTF-8"?>
//! <trace-record version="1">
//!   <product>LOT-7</product>
//!   <type>update</type>
//!   <prev>…64 hex…</prev>
//!   <timestamp>2026-03-01T08:00:00Z</timestamp>
//!   <state>
//!     <field name="batch">B-19</field>
//!     <field name="location">warehouse-7</field>
//!   </state>
//!   <signer>…64 hex…</signer>
//!   <signature>…128 hex…</signature>
//! </trace-record>
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::digest::Digest32;
use crate::identity::{sign_bytes, verify_bytes, IdentityId, PublicKey, SecretKey, Signature};
use crate::xml::{self, Element, XmlWriter};

pub const MAX_PRODUCT_ID_LEN: usize = 64;
const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";
/// 9999-12-31T23:59:59Z, the last instant with a four-digit year.
const MAX_TIMESTAMP: i64 = 253_402_300_799;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RecordError {
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("malformed XML: {0}")]
    MalformedXml(String),
    #[error("non-canonical record: {0}")]
    NonCanonical(String),
    #[error("kind mismatch: expected {expected}, got {actual}")]
    KindMismatch {
        expected: RecordKind,
        actual: RecordKind,
    },
    #[error("product mismatch: {0} vs {1}")]
    ProductMismatch(ProductId, ProductId),
}

fn invalid(msg: impl Into<String>) -> RecordError {
    RecordError::InvalidRecord(msg.into())
}

fn valid_name(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
}

/// Product or batch identifier: 1..=64 chars of `[A-Za-z0-9._-]`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct ProductId(String);

impl ProductId {
    pub fn new(value: impl Into<String>) -> Result<Self, RecordError> {
        let value = value.into();
        if value.len() > MAX_PRODUCT_ID_LEN || !valid_name(&value) {
            return Err(invalid(format!(
                "product id {value:?} must be 1-{MAX_PRODUCT_ID_LEN} chars of [A-Za-z0-9._-]"
            )));
        }
        Ok(Self(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ProductId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::str::FromStr for ProductId {
    type Err = RecordError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s)
    }
}

impl Serialize for ProductId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for ProductId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Self::new(s).map_err(serde::de::Error::custom)
    }
}

/// UTC instant with whole-second precision.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct Timestamp(i64);

impl Timestamp {
    pub fn from_unix(seconds: i64) -> Result<Self, RecordError> {
        if !(0..=MAX_TIMESTAMP).contains(&seconds) {
            return Err(invalid(format!("timestamp {seconds} out of range")));
        }
        Ok(Self(seconds))
    }

    /// Truncates sub-second precision.
    pub fn from_datetime(dt: DateTime<Utc>) -> Result<Self, RecordError> {
        Self::from_unix(dt.timestamp())
    }

    pub fn now() -> Self {
        Self::from_datetime(Utc::now()).expect("system clock within supported range")
    }

    pub fn unix(&self) -> i64 {
        self.0
    }

    pub fn parse(s: &str) -> Result<Self, RecordError> {
        let naive = NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
            .map_err(|e| invalid(format!("bad timestamp {s:?}: {e}")))?;
        let ts = Self::from_unix(naive.and_utc().timestamp())?;
        if ts.to_string() != s {
            return Err(RecordError::NonCanonical(format!("timestamp {s:?}")));
        }
        Ok(ts)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dt = DateTime::<Utc>::from_timestamp(self.0, 0).expect("range checked");
        write!(f, "{}", dt.format(TIMESTAMP_FORMAT))
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Accepts the canonical form or any RFC 3339 instant; sub-seconds are
/// dropped.
impl FromStr for Timestamp {
    type Err = RecordError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Ok(ts) = Self::parse(s) {
            return Ok(ts);
        }
        let dt = DateTime::parse_from_rfc3339(s).map_err(|e| invalid(format!("bad timestamp {s:?}: {e}")))?;
        Self::from_datetime(dt.with_timezone(&Utc))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub required: bool,
}

impl FieldSpec {
    pub fn required(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            required: true,
        }
    }

    pub fn optional(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            required: false,
        }
    }
}

/// The field list carried by an init record, kept sorted by name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct Schema(Vec<FieldSpec>);

impl Schema {
    pub fn new(mut fields: Vec<FieldSpec>) -> Result<Self, RecordError> {
        if fields.is_empty() {
            return Err(invalid("init schema must list at least one field"));
        }
        fields.sort_by(|a, b| a.name.cmp(&b.name));
        for pair in fields.windows(2) {
            if pair[0].name == pair[1].name {
                return Err(invalid(format!("duplicate schema field {:?}", pair[0].name)));
            }
        }
        if let Some(bad) = fields.iter().find(|f| !valid_name(&f.name)) {
            return Err(invalid(format!("bad field name {:?}", bad.name)));
        }
        Ok(Self(fields))
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.0
    }

    pub fn required(&self) -> impl Iterator<Item = &str> {
        self.0.iter().filter(|f| f.required).map(|f| f.name.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Init,
    Update,
    Revoke,
}

impl RecordKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RecordKind::Init => "init",
            RecordKind::Update => "update",
            RecordKind::Revoke => "revoke",
        }
    }

    fn from_wire(s: &str) -> Option<Self> {
        match s {
            "init" => Some(RecordKind::Init),
            "update" => Some(RecordKind::Update),
            "revoke" => Some(RecordKind::Revoke),
            _ => None,
        }
    }
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum RecordBody {
    Init {
        schema: Schema,
    },
    Update {
        state: BTreeMap<String, String>,
    },
    Revoke {
        revokes: Digest32,
        reason: Option<String>,
    },
}

/// One lifecycle event of a product.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TraceRecord {
    pub product: ProductId,
    pub prev: Option<Digest32>,
    pub timestamp: Timestamp,
    #[serde(flatten)]
    pub body: RecordBody,
    pub signer: IdentityId,
    pub signature: Option<Signature>,
}

impl TraceRecord {
    pub fn init(product: ProductId, schema: Schema, timestamp: Timestamp, signer: IdentityId) -> Self {
        Self {
            product,
            prev: None,
            timestamp,
            body: RecordBody::Init { schema },
            signer,
            signature: None,
        }
    }

    pub fn update(
        product: ProductId,
        prev: Digest32,
        state: BTreeMap<String, String>,
        timestamp: Timestamp,
        signer: IdentityId,
    ) -> Self {
        Self {
            product,
            prev: Some(prev),
            timestamp,
            body: RecordBody::Update { state },
            signer,
            signature: None,
        }
    }

    pub fn revoke(
        product: ProductId,
        prev: Digest32,
        revokes: Digest32,
        reason: Option<String>,
        timestamp: Timestamp,
        signer: IdentityId,
    ) -> Self {
        Self {
            product,
            prev: Some(prev),
            timestamp,
            body: RecordBody::Revoke { revokes, reason },
            signer,
            signature: None,
        }
    }

    pub fn kind(&self) -> RecordKind {
        match self.body {
            RecordBody::Init { .. } => RecordKind::Init,
            RecordBody::Update { .. } => RecordKind::Update,
            RecordBody::Revoke { .. } => RecordKind::Revoke,
        }
    }

    pub fn schema(&self) -> Option<&Schema> {
        match &self.body {
            RecordBody::Init { schema } => Some(schema),
            _ => None,
        }
    }

    pub fn state(&self) -> Option<&BTreeMap<String, String>> {
        match &self.body {
            RecordBody::Update { state } => Some(state),
            _ => None,
        }
    }

    pub fn revokes(&self) -> Option<&Digest32> {
        match &self.body {
            RecordBody::Revoke { revokes, .. } => Some(revokes),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), RecordError> {
        match (self.kind(), self.prev.is_some()) {
            (RecordKind::Init, true) => return Err(invalid("init record must not carry prev")),
            (RecordKind::Update | RecordKind::Revoke, false) => {
                return Err(invalid(format!("{} record requires prev", self.kind())))
            }
            _ => {}
        }
        match &self.body {
            RecordBody::Init { schema } => {
                // Schema::new enforces these; re-check values built by hand.
                Schema::new(schema.0.clone())?;
            }
            RecordBody::Update { state } => {
                if state.is_empty() {
                    return Err(invalid("update record must carry at least one state field"));
                }
                for (k, v) in state {
                    if !valid_name(k) {
                        return Err(invalid(format!("bad field name {k:?}")));
                    }
                    if !xml::is_line_safe(v) {
                        return Err(invalid(format!("field {k:?} contains control characters")));
                    }
                }
            }
            RecordBody::Revoke { reason, .. } => {
                if reason.as_deref().is_some_and(|r| !xml::is_line_safe(r)) {
                    return Err(invalid("revocation reason contains control characters"));
                }
            }
        }
        Ok(())
    }

    /// Signs the unsigned canonical bytes and sets `signer` to the key's id.
    pub fn sign(mut self, key: &SecretKey) -> Result<Self, RecordError> {
        self.signer = key.id();
        self.signature = None;
        let bytes = canonicalize(&self, false)?;
        self.signature = Some(sign_bytes(key, &bytes));
        Ok(self)
    }

    pub fn verify_signature(&self, key: &PublicKey) -> bool {
        if key.id() != self.signer {
            return false;
        }
        match (&self.signature, canonicalize(self, false)) {
            (Some(sig), Ok(bytes)) => verify_bytes(key, &bytes, sig),
            _ => false,
        }
    }
}

/// Deterministic XML bytes of a record. With `include_signature = false` the
/// `<signature>` line is omitted; these are the bytes that get signed.
pub fn canonicalize(record: &TraceRecord, include_signature: bool) -> Result<Vec<u8>, RecordError> {
    record.validate()?;
    let mut w = XmlWriter::new();
    w.open("trace-record", &[("version", "1")]);
    w.leaf("product", &[], record.product.as_str());
    w.leaf("type", &[], record.kind().as_str());
    if let Some(prev) = &record.prev {
        w.leaf("prev", &[], &prev.to_hex());
    }
    w.leaf("timestamp", &[], &record.timestamp.to_string());
    match &record.body {
        RecordBody::Init { schema } => {
            w.open("schema", &[]);
            for f in schema.fields() {
                let required = if f.required { "true" } else { "false" };
                w.empty("field", &[("name", &f.name), ("required", required)]);
            }
            w.close("schema");
        }
        RecordBody::Update { state } => {
            w.open("state", &[]);
            for (name, value) in state {
                w.leaf("field", &[("name", name)], value);
            }
            w.close("state");
        }
        RecordBody::Revoke { revokes, reason } => {
            w.leaf("revokes", &[], &revokes.to_hex());
            if let Some(reason) = reason {
                w.leaf("reason", &[], reason);
            }
        }
    }
    w.leaf("signer", &[], &record.signer.to_string());
    if include_signature {
        let sig = record
            .signature
            .ok_or_else(|| invalid("record is unsigned"))?;
        w.leaf("signature", &[], &sig.to_hex());
    }
    w.close("trace-record");
    Ok(w.finish())
}

fn text_of<'a>(root: &'a Element, name: &str) -> Result<&'a str, RecordError> {
    root.child(name)
        .map(|e| e.text.as_str())
        .ok_or_else(|| invalid(format!("missing <{name}>")))
}

fn digest_of(root: &Element, name: &str) -> Result<Digest32, RecordError> {
    Digest32::from_hex(text_of(root, name)?).map_err(|e| invalid(format!("<{name}>: {e}")))
}

/// Structural parse without the byte-exact canonical check.
fn record_from_document(text: &str) -> Result<TraceRecord, RecordError> {
    let root = xml::parse_document(text).map_err(|e| RecordError::MalformedXml(e.to_string()))?;
    if root.name != "trace-record" || root.attr("version") != Some("1") {
        return Err(invalid("root element must be <trace-record version=\"1\">"));
    }
    let product = ProductId::new(text_of(&root, "product")?)?;
    let kind_text = text_of(&root, "type")?;
    let kind = RecordKind::from_wire(kind_text).ok_or_else(|| invalid(format!("unknown type {kind_text:?}")))?;
    let prev = match root.child("prev") {
        Some(_) => Some(digest_of(&root, "prev")?),
        None => None,
    };
    let timestamp = Timestamp::parse(text_of(&root, "timestamp")?)?;
    let body = match kind {
        RecordKind::Init => {
            let el = root.child("schema").ok_or_else(|| invalid("missing <schema>"))?;
            let fields = el
                .children_named("field")
                .map(|f| {
                    let name = f.attr("name").ok_or_else(|| invalid("<field> without name"))?;
                    let required = match f.attr("required") {
                        Some("true") => true,
                        Some("false") => false,
                        other => return Err(invalid(format!("bad required attribute {other:?}"))),
                    };
                    Ok(FieldSpec {
                        name: name.to_string(),
                        required,
                    })
                })
                .collect::<Result<Vec<_>, RecordError>>()?;
            RecordBody::Init {
                schema: Schema::new(fields)?,
            }
        }
        RecordKind::Update => {
            let el = root.child("state").ok_or_else(|| invalid("missing <state>"))?;
            let mut state = BTreeMap::new();
            for f in el.children_named("field") {
                let name = f.attr("name").ok_or_else(|| invalid("<field> without name"))?;
                if state.insert(name.to_string(), f.text.clone()).is_some() {
                    return Err(invalid(format!("duplicate state field {name:?}")));
                }
            }
            RecordBody::Update { state }
        }
        RecordKind::Revoke => RecordBody::Revoke {
            revokes: digest_of(&root, "revokes")?,
            reason: root.child("reason").map(|e| e.text.clone()),
        },
    };
    let signer = IdentityId::from_digest(digest_of(&root, "signer")?);
    let signature = match root.child("signature") {
        Some(el) => Some(
            Signature::from_hex(&el.text).map_err(|e| invalid(format!("<signature>: {e}")))?,
        ),
        None => None,
    };
    let record = TraceRecord {
        product,
        prev,
        timestamp,
        body,
        signer,
        signature,
    };
    record.validate()?;
    Ok(record)
}

/// Parses a stored record file. Only the exact canonical serialization of a
/// signed record is accepted.
pub fn parse_record(bytes: &[u8]) -> Result<TraceRecord, RecordError> {
    if bytes.contains(&b'\r') {
        return Err(RecordError::NonCanonical("CR line endings".into()));
    }
    let text = std::str::from_utf8(bytes).map_err(|e| RecordError::MalformedXml(e.to_string()))?;
    if text.contains("<!--") {
        return Err(RecordError::NonCanonical("comments are not allowed".into()));
    }
    let record = record_from_document(text)?;
    if record.signature.is_none() {
        return Err(invalid("missing <signature>"));
    }
    if canonicalize(&record, true)? != bytes {
        return Err(RecordError::NonCanonical(
            "bytes differ from canonical serialization".into(),
        ));
    }
    Ok(record)
}

/// Best-effort reading of a damaged record file: lossy UTF-8, no canonical
/// check. Used only to describe files whose digest no longer matches.
pub fn parse_record_lossy(bytes: &[u8]) -> Option<TraceRecord> {
    record_from_document(&String::from_utf8_lossy(bytes)).ok()
}

/// Extracts `<tag>value</tag>` from raw bytes without parsing the document.
pub(crate) fn scan_leaf(bytes: &[u8], tag: &str) -> Option<String> {
    let text = String::from_utf8_lossy(bytes);
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.find(&open)? + open.len();
    let len = text[start..].find(&close)?;
    Some(text[start..start + len].to_string())
}

/// A required field the update does not carry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "violation", content = "field", rename_all = "snake_case")]
pub enum Violation {
    MissingField(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingField(name) => write!(f, "missing required field {name:?}"),
        }
    }
}

/// Lists required init fields absent from an update's state. Extra fields
/// are allowed.
pub fn check_conformance(update: &TraceRecord, spec: &TraceRecord) -> Result<Vec<Violation>, RecordError> {
    let (Some(state), Some(schema)) = (update.state(), spec.schema()) else {
        return Err(if update.kind() != RecordKind::Update {
            RecordError::KindMismatch {
                expected: RecordKind::Update,
                actual: update.kind(),
            }
        } else {
            RecordError::KindMismatch {
                expected: RecordKind::Init,
                actual: spec.kind(),
            }
        });
    };
    if update.product != spec.product {
        return Err(RecordError::ProductMismatch(
            update.product.clone(),
            spec.product.clone(),
        ));
    }
    Ok(schema
        .required()
        .filter(|name| !state.contains_key(*name))
        .map(|name| Violation::MissingField(name.to_string()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::digest::sha256;
    use crate::identity::keygen;

    fn pid(s: &str) -> ProductId {
        ProductId::new(s).unwrap()
    }

    fn ts(s: i64) -> Timestamp {
        Timestamp::from_unix(s).unwrap()
    }

    fn state(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    fn signed_init() -> TraceRecord {
        let (sk, _) = keygen().unwrap();
        let schema = Schema::new(vec![FieldSpec::required("origin"), FieldSpec::required("batch")]).unwrap();
        TraceRecord::init(pid("P-1"), schema, ts(1_700_000_000), sk.id())
            .sign(&sk)
            .unwrap()
    }

    #[test]
    fn product_id_rules() {
        assert!(ProductId::new("lot_7.A-b").is_ok());
        assert!(ProductId::new("").is_err());
        assert!(ProductId::new("a b").is_err());
        assert!(ProductId::new("x".repeat(64)).is_ok());
        assert!(ProductId::new("x".repeat(65)).is_err());
    }

    #[test]
    fn timestamp_format() {
        assert_eq!(ts(0).to_string(), "1970-01-01T00:00:00Z");
        assert_eq!(Timestamp::parse("2026-10-15T12:30:00Z").unwrap().to_string(), "2026-10-15T12:30:00Z");
        assert!(Timestamp::parse("2026-10-15T12:30:00+00:00").is_err());
    }

    #[test]
    fn canonical_is_deterministic() {
        let r = signed_init();
        assert_eq!(canonicalize(&r, true).unwrap(), canonicalize(&r, true).unwrap());
    }

    #[test]
    fn state_fields_sorted_by_name() {
        let mut map = BTreeMap::new();
        map.insert("b".to_string(), "2".to_string());
        map.insert("a".to_string(), "1".to_string());
        let r = TraceRecord::update(pid("P-1"), sha256(b"prev"), map, ts(5), IdentityId::from_digest(sha256(b"k")));
        let text = String::from_utf8(canonicalize(&r, false).unwrap()).unwrap();
        let a = text.find("<field name=\"a\">").unwrap();
        let b = text.find("<field name=\"b\">").unwrap();
        assert!(a < b);
    }

    #[test]
    fn unsigned_differs_only_by_signature_line() {
        let r = signed_init();
        let signed = String::from_utf8(canonicalize(&r, true).unwrap()).unwrap();
        let unsigned = String::from_utf8(canonicalize(&r, false).unwrap()).unwrap();
        let signed_lines: Vec<&str> = signed.lines().collect();
        let unsigned_lines: Vec<&str> = unsigned.lines().collect();
        assert_eq!(signed_lines.len(), unsigned_lines.len() + 1);
        let removed: Vec<&str> = signed_lines
            .iter()
            .filter(|l| !unsigned_lines.contains(l))
            .copied()
            .collect();
        assert_eq!(removed.len(), 1);
        assert!(removed[0].starts_with("  <signature>"));
        let without: Vec<&str> = signed_lines.iter().filter(|l| !l.contains("<signature>")).copied().collect();
        assert_eq!(without, unsigned_lines);
    }

    #[test]
    fn exact_init_layout() {
        let signer = IdentityId::from_digest(Digest32::ZERO);
        let schema = Schema::new(vec![FieldSpec::required("origin"), FieldSpec::optional("batch")]).unwrap();
        let r = TraceRecord::init(pid("LOT-1"), schema, ts(0), signer);
        let expected = format!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<trace-record version=\"1\">\n  <product>LOT-1</product>\n  <type>init</type>\n  <timestamp>1970-01-01T00:00:00Z</timestamp>\n  <schema>\n    <field name=\"batch\" required=\"false\"/>\n    <field name=\"origin\" required=\"true\"/>\n  </schema>\n  <signer>{}</signer>\n</trace-record>\n",
            "0".repeat(64)
        );
        assert_eq!(String::from_utf8(canonicalize(&r, false).unwrap()).unwrap(), expected);
    }

    #[test]
    fn kind_invariants() {
        let signer = IdentityId::from_digest(Digest32::ZERO);
        let mut r = TraceRecord::update(pid("P"), Digest32::ZERO, state(&[("a", "1")]), ts(1), signer);
        r.prev = None;
        assert!(matches!(canonicalize(&r, false), Err(RecordError::InvalidRecord(_))));
        let empty = TraceRecord::update(pid("P"), Digest32::ZERO, BTreeMap::new(), ts(1), signer);
        assert!(matches!(canonicalize(&empty, false), Err(RecordError::InvalidRecord(_))));
        let newline = TraceRecord::update(pid("P"), Digest32::ZERO, state(&[("a", "x\ny")]), ts(1), signer);
        assert!(canonicalize(&newline, false).is_err());
        assert!(Schema::new(vec![]).is_err());
        assert!(Schema::new(vec![FieldSpec::required("a"), FieldSpec::optional("a")]).is_err());
    }

    #[test]
    fn parse_round_trip_each_kind() {
        let (sk, _) = keygen().unwrap();
        let init = signed_init();
        let update = TraceRecord::update(
            pid("P-1"),
            sha256(b"x"),
            state(&[("origin", "farm <3> & co"), ("batch", "\"7\"")]),
            ts(10),
            sk.id(),
        )
        .sign(&sk)
        .unwrap();
        let revoke = TraceRecord::revoke(pid("P-1"), sha256(b"y"), sha256(b"z"), Some("typo".into()), ts(11), sk.id())
            .sign(&sk)
            .unwrap();
        let revoke_no_reason = TraceRecord::revoke(pid("P-1"), sha256(b"y"), sha256(b"z"), None, ts(11), sk.id())
            .sign(&sk)
            .unwrap();
        for r in [init, update, revoke, revoke_no_reason] {
            let bytes = canonicalize(&r, true).unwrap();
            assert_eq!(parse_record(&bytes).unwrap(), r);
            assert!(r.verify_signature(&sk.public_key()) || r.kind() == RecordKind::Init);
        }
    }

    #[test]
    fn parse_rejections() {
        let r = signed_init();
        let bytes = canonicalize(&r, true).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();

        let crlf = text.replace('\n', "\r\n");
        assert!(matches!(parse_record(crlf.as_bytes()), Err(RecordError::NonCanonical(_))));

        let commented = text.replace("  <type>", "  <!-- note -->\n  <type>");
        assert!(matches!(parse_record(commented.as_bytes()), Err(RecordError::NonCanonical(_))));

        let unsigned = canonicalize(&r, false).unwrap();
        assert!(matches!(parse_record(&unsigned), Err(RecordError::InvalidRecord(_))));

        let product_line = text.lines().nth(2).unwrap().to_string();
        let type_line = text.lines().nth(3).unwrap().to_string();
        let swapped = text.replacen(&format!("{product_line}\n{type_line}"), &format!("{type_line}\n{product_line}"), 1);
        assert!(matches!(parse_record(swapped.as_bytes()), Err(RecordError::NonCanonical(_))));

        let indented = text.replace("  <type>", "   <type>");
        assert!(matches!(parse_record(indented.as_bytes()), Err(RecordError::NonCanonical(_))));

        let broken = text.replace("</product>", "</produce>");
        assert!(matches!(parse_record(broken.as_bytes()), Err(RecordError::MalformedXml(_))));

        assert!(matches!(parse_record(&[0xff, 0xfe]), Err(RecordError::MalformedXml(_))));
    }

    #[test]
    fn conformance_cases() {
        let init = signed_init();
        let signer = init.signer;
        let superset = TraceRecord::update(pid("P-1"), Digest32::ZERO, state(&[("origin", "GR"), ("batch", "1"), ("temp", "4C")]), ts(2), signer);
        assert_eq!(check_conformance(&superset, &init).unwrap(), vec![]);

        let partial = TraceRecord::update(pid("P-1"), Digest32::ZERO, state(&[("origin", "GR")]), ts(2), signer);
        assert_eq!(
            check_conformance(&partial, &init).unwrap(),
            vec![Violation::MissingField("batch".into())]
        );

        let optional_only = TraceRecord::init(
            pid("P-1"),
            Schema::new(vec![FieldSpec::optional("note")]).unwrap(),
            ts(1),
            signer,
        );
        let x = TraceRecord::update(pid("P-1"), Digest32::ZERO, state(&[("x", "1")]), ts(2), signer);
        assert_eq!(check_conformance(&x, &optional_only).unwrap(), vec![]);

        assert!(matches!(check_conformance(&init, &init), Err(RecordError::KindMismatch { .. })));
        let other = TraceRecord::update(pid("P-2"), Digest32::ZERO, state(&[("x", "1")]), ts(2), signer);
        assert!(matches!(check_conformance(&other, &init), Err(RecordError::ProductMismatch(..))));
    }

    #[test]
    fn scan_leaf_finds_prev() {
        let d = sha256(b"p");
        let text = format!("junk\n  <prev>{d}</prev>\n");
        assert_eq!(scan_leaf(text.as_bytes(), "prev"), Some(d.to_hex()));
        assert_eq!(scan_leaf(b"<prev>abc", "prev"), None);
    }
}
